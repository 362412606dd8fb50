"""Staged map-recovery pipeline: ablation ladder, feedback loop, robustness.

Stages, in order of increasing machinery:

  unoptimized          dead-reckoned input, no optimization
  manhattan            Manhattan constraints from high-confidence proposals
  manhattan_lc         plus ICP loop closures
  dense_lc             plus the low-confidence proposal band (ICP-filtered)
  feedback             dense constraints regenerated cyclically on the
                       optimized graph until the proposal set stabilizes
  incremental_feedback the same feedback strategy on the incremental solver,
                       with constraints injected at checkpoints mid-stream

The feedback loop is the two-way exchange between representations: a better
pose estimate straightens the rectified Manhattan graph, which improves the
comparator's proposals, which add constraints that improve the estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from scipy.spatial import cKDTree

from . import similarity
from .constraints import (
    LoopCandidate,
    build_adjacent_manhattan_constraints,
    build_loop_constraints,
    build_manhattan_constraints,
)
from .manhattan import ManhattanGraph, build_manhattan
from .metrics import AteResult, ate
from .optimizer import (
    IncrementalSolver,
    SolveReport,
    SolverConfig,
    chi2,
    solve_batch,
)
from .pose_graph import (
    ConstraintKind,
    LOOP_INFO_DIAG,
    PGEdge,
    Pose2D,
    PoseGraph,
    between,
    info_diag,
)
from .similarity import ConfidenceBand, ProposalPair, SiameseModel, SynthSpec
from .simulator import (
    NoiseModel,
    Scan,
    Trajectory,
    WarehouseLayout,
    corrupt,
    default_plan,
    generate_layout,
    generate_trajectory,
)
from .topology import group, smooth_labels


class StageId(Enum):
    UNOPTIMIZED = "unoptimized"
    MANHATTAN_ONLY = "manhattan"
    MANHATTAN_PLUS_LC = "manhattan_lc"
    DENSE_PLUS_LC = "dense_lc"
    FEEDBACK_LOOP = "feedback"
    INCREMENTAL_FEEDBACK = "incremental_feedback"


STAGE_ORDER = list(StageId)


@dataclass
class PipelineConfig:
    """Every knob of the pipeline, with defaults tuned for the 30 x 50 world."""

    # layout / route
    width: float = 30.0
    height: float = 50.0
    n_racks: int = 21
    aisle_width: float = 0.6
    plan_stride: int = 4
    plan_count: int = 4
    step: float = 0.25
    # odometry and sensing noise
    sigma_x: float = 0.008
    sigma_y: float = 0.004
    sigma_theta: float = 0.035
    bias_x: float = 0.0008
    bias_y: float = 0.0
    bias_theta: float = 0.0012
    label_error_rate: float = 0.06
    scan_sigma: float = 0.02
    beams: int = 90
    max_range: float = 10.0
    # topology
    smooth_window: int = 5
    min_run: int = 3
    # similarity network
    mlp_epochs: int = 150
    mlp_pairs: int = 1200
    mlp_lr: float = 1.0
    mlp_seed: int | None = None  # derived from the run seed when None
    margin: float = 1.0
    tau_high: float = 0.5
    tau_low: float = 0.6
    # constraints
    loop_samples: int = 5
    icp_rho: float = 0.002
    neighborhood: int = 3
    # solver
    phi: float = 1.0
    robust: bool = True
    max_iterations: int = 100
    chi2_rel_tol: float = 1e-6
    incremental_batch_period: int = 10
    # feedback
    max_cycles: int = 10
    feedback_chi2_tol: float = 1e-4

    def solver_config(self, mode: str = "batch") -> SolverConfig:
        robust_kinds = (
            frozenset({ConstraintKind.LOOP_CLOSURE, ConstraintKind.MANHATTAN})
            if self.robust
            else frozenset()
        )
        return SolverConfig(
            max_iterations=self.max_iterations,
            chi2_rel_tol=self.chi2_rel_tol,
            dcs_phi=self.phi,
            robust_kinds=robust_kinds,
            mode=mode,
            incremental_batch_period=self.incremental_batch_period,
        )


@dataclass
class Scenario:
    """One simulated run: world, truth, corrupted input, trained comparator."""

    cfg: PipelineConfig
    seed: int
    layout: WarehouseLayout
    truth: Trajectory
    graph: PoseGraph
    scans: list[Scan]
    model: SiameseModel
    feature_scale: float


@dataclass
class FeedbackState:
    cycle: int
    graph: PoseGraph
    mg: ManhattanGraph
    proposals: list[ProposalPair]
    tp: int
    fp: int
    accuracy: float
    chi2: float


@dataclass
class StageResult:
    stage: StageId
    graph: PoseGraph
    ate: AteResult
    diagnostics: dict


def build_scenario(cfg: PipelineConfig, seed: int, with_scans: bool = True) -> Scenario:
    layout = generate_layout(
        n_racks=cfg.n_racks,
        aisle_width=cfg.aisle_width,
        width=cfg.width,
        height=cfg.height,
        seed=seed,
    )
    plan = default_plan(layout, stride=cfg.plan_stride, count=cfg.plan_count)
    truth = generate_trajectory(layout, plan, step=cfg.step)
    noise = NoiseModel(
        odom_sigma=(cfg.sigma_x, cfg.sigma_y, cfg.sigma_theta),
        drift_bias=(cfg.bias_x, cfg.bias_y, cfg.bias_theta),
        label_error_rate=cfg.label_error_rate,
        scan_range_sigma=cfg.scan_sigma,
        rng_seed=seed,
    )
    graph, scans = corrupt(
        truth, layout, noise, beams=cfg.beams, max_range=cfg.max_range, compute_scans=with_scans
    )
    scale = max(cfg.width, cfg.height)
    mlp_seed = cfg.mlp_seed if cfg.mlp_seed is not None else seed + 7919
    spec = SynthSpec(
        length_range=(2.0, max(4.0, cfg.height * 0.95)),
        spacing_range=(
            cfg.plan_stride * (cfg.width / max(1, cfg.n_racks + 1)) * 0.8,
            cfg.width * 0.4,
        ),
        extent=scale,
    )
    pairs = similarity.synthesize_training_pairs(spec, cfg.mlp_pairs, seed=mlp_seed)
    model = similarity.init_model(
        seed=mlp_seed, margin=cfg.margin, tau_high=cfg.tau_high, tau_low=cfg.tau_low
    )
    model, _ = similarity.train(model, pairs, epochs=cfg.mlp_epochs, learning_rate=cfg.mlp_lr)
    return Scenario(cfg, seed, layout, truth, graph, scans, model, scale)


def manhattan_of(pg: PoseGraph, cfg: PipelineConfig) -> ManhattanGraph:
    labels = smooth_labels(pg.labels, cfg.smooth_window)
    return build_manhattan(pg, group(labels, cfg.min_run))


def propose_on(pg: PoseGraph, scenario: Scenario) -> tuple[ManhattanGraph, list[ProposalPair]]:
    mg = manhattan_of(pg, scenario.cfg)
    props = similarity.propose(scenario.model, mg, scenario.feature_scale)
    return mg, props


# --- proposal ground truth (diagnostics only; the algorithm never sees it) ---

def _true_same_instance(truth: Trajectory, a, b, tol: float = 0.7) -> bool:
    pa = truth.poses[a.pg_start : a.pg_end + 1, :2]
    pb = truth.poses[b.pg_start : b.pg_end + 1, :2]
    da = cKDTree(pb).query(pa)[0]
    db = cKDTree(pa).query(pb)[0]
    return float(np.mean(da)) < tol and float(np.mean(db)) < tol


def score_proposals(
    proposals: list[ProposalPair], mg: ManhattanGraph, truth: Trajectory
) -> tuple[int, int, float]:
    """(true positives, false positives, accuracy) against simulator geometry."""
    tp = fp = 0
    for p in proposals:
        if _true_same_instance(truth, mg.meta_nodes[p.meta_i], mg.meta_nodes[p.meta_j]):
            tp += 1
        else:
            fp += 1
    acc = tp / (tp + fp) if tp + fp else 1.0
    return tp, fp, acc


# --- constraint generation -------------------------------------------------

def _band_filter(props: list[ProposalPair], dense: bool) -> list[ProposalPair]:
    return list(props) if dense else [p for p in props if p.band is ConfidenceBand.HIGH]


class _LoopCache:
    """ICP results per proposal key; reused across feedback cycles."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.edges: dict[tuple, list[PGEdge]] = {}
        self.rejected: list[LoopCandidate] = []

    def loops_for(self, props: list[ProposalPair], pg: PoseGraph, mg: ManhattanGraph) -> list[PGEdge]:
        cfg = self.scenario.cfg
        out: list[PGEdge] = []
        for p in props:
            if p.key not in self.edges:
                edges, rej = build_loop_constraints(
                    [p], pg, self.scenario.scans, mg, k=cfg.loop_samples, rho=cfg.icp_rho
                )
                self.edges[p.key] = edges
                self.rejected.extend(rej)
            out.extend(self.edges[p.key])
        return out


def _constrained_graph(
    pg: PoseGraph,
    scenario: Scenario,
    props: list[ProposalPair],
    mg: ManhattanGraph,
    cache: _LoopCache | None,
    with_loops: bool,
) -> PoseGraph:
    """Copy of the graph with constraints appended.

    Manhattan relations come from high-confidence proposals only: their
    orientation is pinned hard, so an uncertain pair must not contribute one.
    The low-confidence band feeds the loop-closure path, where ICP residual
    filtering (and the robust kernel) guards against wrong matches.
    """
    cfg = scenario.cfg
    high = [p for p in props if p.band is ConfidenceBand.HIGH]
    new_edges: list[PGEdge] = []
    new_edges.extend(build_adjacent_manhattan_constraints(mg, pg, neighborhood=cfg.neighborhood))
    new_edges.extend(build_manhattan_constraints(high, mg, pg, neighborhood=cfg.neighborhood))
    if with_loops:
        cache = cache or _LoopCache(scenario)
        new_edges.extend(cache.loops_for(props, pg, mg))
    out = pg.copy()
    out.edges.extend(new_edges)
    return out


# --- stages -----------------------------------------------------------------

def run_feedback(
    scenario: Scenario, max_cycles: int | None = None, solver: SolverConfig | None = None
) -> list[FeedbackState]:
    """Cyclic dense-proposal optimization until the proposal set stabilizes.

    Stops when the proposal set repeats, the robust chi2 plateaus, or the
    cycle budget runs out. Per-cycle proposal TP/FP against simulator ground
    truth is recorded for diagnostics.
    """
    cfg = scenario.cfg
    max_cycles = max_cycles or cfg.max_cycles
    solver = solver or cfg.solver_config()
    cache = _LoopCache(scenario)
    history: list[FeedbackState] = []
    pg = scenario.graph
    prev_keys: set | None = None
    prev_chi2: float | None = None
    for cycle in range(1, max_cycles + 1):
        mg, props = propose_on(pg, scenario)
        tp, fp, acc = score_proposals(props, mg, scenario.truth)
        constrained = _constrained_graph(pg, scenario, props, mg, cache, with_loops=True)
        solved, report = solve_batch(constrained, solver)
        pg = PoseGraph(solved.poses, list(scenario.graph.labels), list(scenario.graph.edges))
        history.append(FeedbackState(cycle, solved, mg, props, tp, fp, acc, report.final_chi2))
        keys = ({p.key for p in props}, tuple(mg.turns))
        if prev_keys is not None and keys == prev_keys:
            break
        if prev_chi2 is not None and abs(report.final_chi2 - prev_chi2) <= cfg.feedback_chi2_tol * max(
            prev_chi2, 1e-12
        ):
            break
        prev_keys, prev_chi2 = keys, report.final_chi2
    return history


def _run_incremental_feedback(scenario: Scenario) -> tuple[PoseGraph, list[FeedbackState]]:
    """Feedback strategy on the streaming solver.

    Nodes stream in id order; at three checkpoints the constraint machinery
    runs on the prefix built so far and any new edges trigger full solves, so
    later dead reckoning extends from a partially corrected estimate. After
    the stream a standard feedback loop polishes the complete graph.
    """
    cfg = scenario.cfg
    solver_cfg = cfg.solver_config(mode="incremental")
    inc = IncrementalSolver(solver_cfg)
    odo = {e.j: e for e in scenario.graph.edges if e.kind is ConstraintKind.ODOMETRY}
    n = scenario.graph.n_nodes
    checkpoints = {n // 3, (2 * n) // 3}
    cache = _LoopCache(scenario)
    added: set[tuple[int, int, str]] = set()

    def inject(prefix_n: int) -> None:
        prefix = PoseGraph(
            np.array(inc.poses), list(scenario.graph.labels[:prefix_n]), list(inc.edges)
        )
        labels = smooth_labels(prefix.labels, cfg.smooth_window)
        tg = group(labels, cfg.min_run)
        regions = tg.regions[:-1] if len(tg.regions) > 1 and prefix_n < n else tg.regions
        if not any(r.label.name != "INTERSECTION" for r in regions):
            return
        from .topology import TopologicalGraph

        mg = build_manhattan(prefix, TopologicalGraph(list(regions)))
        props = similarity.propose(scenario.model, mg, scenario.feature_scale)
        props = _band_filter(props, dense=True)
        high = [p for p in props if p.band is ConfidenceBand.HIGH]
        edges = build_adjacent_manhattan_constraints(mg, prefix, neighborhood=cfg.neighborhood)
        edges = edges + build_manhattan_constraints(high, mg, prefix, neighborhood=cfg.neighborhood)
        edges = edges + cache.loops_for(props, prefix, mg)
        fresh = [e for e in edges if (e.i, e.j, e.kind.value) not in added]
        for e in fresh:
            added.add((e.i, e.j, e.kind.value))
        inc.add_edges(fresh)

    for i in range(n):
        inc.add_node(i, odo.get(i), initial=scenario.graph.node_pose(0) if i == 0 else None,
                     label=scenario.graph.labels[i])
        if i + 1 in checkpoints:
            inject(i + 1)

    streamed = inc.graph()
    # keep the streamed estimate but drop the checkpoint constraints: they
    # were built on half-corrected prefixes and the polishing cycles
    # regenerate better ones from the full graph
    odo_only = [e for e in streamed.edges if e.kind is ConstraintKind.ODOMETRY]
    clean = PoseGraph(streamed.poses, list(scenario.graph.labels), odo_only)
    scenario_after = replace(scenario, graph=clean)
    history = run_feedback(scenario_after, solver=cfg.solver_config())
    final = history[-1].graph if history else clean
    return final, history


def run_stage(stage: StageId, scenario: Scenario) -> StageResult:
    """Run one ablation stage and measure its trajectory error."""
    cfg = scenario.cfg
    diagnostics: dict = {}
    if stage is StageId.UNOPTIMIZED:
        out = scenario.graph
    elif stage in (StageId.MANHATTAN_ONLY, StageId.MANHATTAN_PLUS_LC, StageId.DENSE_PLUS_LC):
        mg, props = propose_on(scenario.graph, scenario)
        dense = stage is StageId.DENSE_PLUS_LC
        props = _band_filter(props, dense=dense)
        with_loops = stage is not StageId.MANHATTAN_ONLY
        cache = _LoopCache(scenario)
        constrained = _constrained_graph(scenario.graph, scenario, props, mg, cache, with_loops)
        out, report = solve_batch(constrained, cfg.solver_config())
        tp, fp, acc = score_proposals(props, mg, scenario.truth)
        diagnostics.update(
            proposals=len(props), tp=tp, fp=fp, accuracy=acc,
            final_chi2=report.final_chi2, iterations=report.iterations,
            rejected=len(cache.rejected),
        )
    elif stage is StageId.FEEDBACK_LOOP:
        history = run_feedback(scenario)
        out = history[-1].graph
        diagnostics["feedback"] = history
    elif stage is StageId.INCREMENTAL_FEEDBACK:
        out, history = _run_incremental_feedback(scenario)
        diagnostics["feedback"] = history
    else:
        raise ValueError(f"unknown stage {stage}")
    return StageResult(stage, out, ate(out, scenario.truth), diagnostics)


def run_ladder(cfg: PipelineConfig, seeds: list[int], stages: list[StageId] | None = None):
    """All stages over all seeds; returns {seed: {stage: StageResult}}."""
    stages = stages or STAGE_ORDER
    results: dict[int, dict[StageId, StageResult]] = {}
    for seed in seeds:
        scenario = build_scenario(cfg, seed)
        results[seed] = {stage: run_stage(stage, scenario) for stage in stages}
    return results


# --- robustness sweep --------------------------------------------------------

def true_loop_edges(
    truth: Trajectory,
    seed: int,
    max_pairs: int = 60,
    min_separation: int = 80,
    radius: float = 0.4,
    meas_sigma: tuple[float, float, float] = (0.02, 0.02, 0.01),
) -> list[PGEdge]:
    """Ground-truth revisit constraints, the raw material for the sweep."""
    rng = np.random.default_rng(seed + 424243)
    tree = cKDTree(truth.poses[:, :2])
    pairs = sorted(
        (i, j) for i, j in tree.query_pairs(radius) if abs(j - i) >= min_separation
    )
    if len(pairs) > max_pairs:
        idx = np.linspace(0, len(pairs) - 1, max_pairs).astype(int)
        pairs = [pairs[k] for k in idx]
    info = info_diag(LOOP_INFO_DIAG)
    out = []
    for i, j in pairs:
        rel = between(Pose2D.from_array(truth.poses[i]), Pose2D.from_array(truth.poses[j]))
        noise = rng.normal(0.0, meas_sigma)
        meas = Pose2D(rel.x + noise[0], rel.y + noise[1], rel.theta + noise[2])
        out.append(PGEdge(i, j, meas, info, ConstraintKind.LOOP_CLOSURE, robust=True))
    return out


def _corrupt_loop_set(
    loops: list[PGEdge], truth: Trajectory, fraction: float, rng: np.random.Generator
) -> list[PGEdge]:
    """Replace a share of true loops with equal parts false positives and deletions."""
    if not 0.0 <= fraction <= 0.9:
        raise ValueError("fraction must be in [0, 0.9]")
    n = len(loops)
    n_bad = int(round(fraction * n))
    n_fp = n_bad // 2
    n_fn = n_bad - n_fp
    order = rng.permutation(n)
    drop = set(order[: n_fp + n_fn].tolist())
    kept = [e for k, e in enumerate(loops) if k not in drop]
    info = info_diag(LOOP_INFO_DIAG)
    fps: list[PGEdge] = []
    tries = 0
    while len(fps) < n_fp and tries < 1000:
        tries += 1
        i, j = sorted(rng.integers(0, truth.n_poses, size=2).tolist())
        if j - i < 50:
            continue
        if np.linalg.norm(truth.poses[i, :2] - truth.poses[j, :2]) < 8.0:
            continue
        # claims "same spot" between unrelated places
        fps.append(PGEdge(i, j, Pose2D(), info, ConstraintKind.LOOP_CLOSURE, robust=True))
    return kept + fps


def robustness_sweep(
    cfg: PipelineConfig, fractions: list[float], seeds: list[int]
) -> list[dict]:
    """ATE with and without the robust kernel across outlier fractions.

    Rows: one per (seed, fraction) with keys seed, fraction, ate_dcs,
    ate_nonrobust. Deterministic per seed.
    """
    rows: list[dict] = []
    for seed in seeds:
        scenario = build_scenario(cfg, seed, with_scans=False)
        loops = true_loop_edges(scenario.truth, seed)
        for frac in fractions:
            rng = np.random.default_rng(seed * 100003 + int(round(frac * 1000)))
            loop_set = _corrupt_loop_set(loops, scenario.truth, frac, rng)
            g = scenario.graph.copy()
            g.edges.extend(loop_set)
            solved_r, _ = solve_batch(g, cfg.solver_config())
            nonrobust = replace(cfg, robust=False)
            solved_n, _ = solve_batch(g, nonrobust.solver_config())
            rows.append(
                dict(
                    seed=seed,
                    fraction=frac,
                    ate_dcs=ate(solved_r, scenario.truth).rmse,
                    ate_nonrobust=ate(solved_n, scenario.truth).rmse,
                )
            )
    return rows


# --- CSV emission -------------------------------------------------------------

def ladder_csv(results) -> str:
    lines = ["stage,seed,ate"]
    for seed in sorted(results):
        for stage in STAGE_ORDER:
            if stage in results[seed]:
                lines.append(f"{stage.value},{seed},{results[seed][stage].ate.rmse:.6f}")
    return "\n".join(lines) + "\n"


def feedback_csv(results) -> str:
    lines = ["seed,cycle,tp,fp,accuracy"]
    for seed in sorted(results):
        for stage in (StageId.FEEDBACK_LOOP, StageId.INCREMENTAL_FEEDBACK):
            res = results[seed].get(stage)
            if not res:
                continue
            for st in res.diagnostics.get("feedback", []):
                lines.append(f"{seed},{st.cycle},{st.tp},{st.fp},{st.accuracy:.4f}")
            break  # one feedback trace per seed is enough for the report
    return "\n".join(lines) + "\n"


def robustness_csv(rows: list[dict]) -> str:
    lines = ["seed,fraction,ate_dcs,ate_nonrobust"]
    for r in rows:
        lines.append(f"{r['seed']},{r['fraction']:.3f},{r['ate_dcs']:.6f},{r['ate_nonrobust']:.6f}")
    return "\n".join(lines) + "\n"
