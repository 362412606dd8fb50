"""Sparse Levenberg-Marquardt pose-graph optimization with a DCS robust kernel.

The solver maximizes the posterior over poses given odometry, loop-closure
and Manhattan constraints, i.e. it minimizes the weighted squared residuals
r_ij = log(Z_ij^-1 (X_i^-1 X_j)). Loop and Manhattan edges are robustified by
dynamic covariance scaling: each of their information matrices is multiplied
by s^2 with s = min(1, 2*phi / (phi + chi2)), which leaves consistent edges
untouched and smoothly switches gross outliers off.

Two objectives appear on purpose. Step acceptance inside one iteration uses
the surrogate with the scales frozen at the iteration start (the standard
iteratively-reweighted scheme; this is what lets badly drifted graphs anneal
their way in, one consistent loop at a time). Reported and converged-on
chi2 is the true robust objective, sum of min(chi2_e, phi) over robust edges
plus plain chi2 elsewhere, which a successful solve drives down monotonically.

Node 0 is the gauge and stays fixed. Incremental mode feeds nodes in id
order, dead-reckons their initial estimates, runs periodic local solves over
a trailing window and a full relinearized solve whenever loop or Manhattan
edges arrive; its final estimate matches a one-shot batch solve.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .pose_graph import (
    ConstraintKind,
    PGEdge,
    Pose2D,
    PoseGraph,
    compose,
    wrap_angle,
    wrap_angles,
)

DEFAULT_ROBUST_KINDS = frozenset({ConstraintKind.LOOP_CLOSURE, ConstraintKind.MANHATTAN})
TWO_PI_F = 2.0 * math.pi


@dataclass
class SolverConfig:
    max_iterations: int = 100
    chi2_rel_tol: float = 1e-6
    damping: float = 1e-4  # initial Levenberg-Marquardt lambda
    dcs_phi: float = 1.0
    robust_kinds: frozenset = DEFAULT_ROBUST_KINDS
    mode: str = "batch"  # batch | incremental
    incremental_batch_period: int = 10

    def __post_init__(self):
        if self.chi2_rel_tol <= 0 or self.damping <= 0 or self.dcs_phi <= 0:
            raise ValueError("tolerances, damping and phi must be positive")
        if self.mode not in ("batch", "incremental"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class SolveReport:
    initial_chi2: float
    final_chi2: float
    iterations: int
    scales: np.ndarray  # per-edge robust scale s at the solution
    converged: bool


def dcs_scale(chi2_edge: float, phi: float) -> float:
    """Dynamic covariance scaling factor s = min(1, 2*phi/(phi + chi2))."""
    if chi2_edge < 0:
        raise ValueError("chi2 must be non-negative")
    return min(1.0, 2.0 * phi / (phi + chi2_edge))


class _EdgeTable:
    """Edges unpacked into arrays for vectorized linearization."""

    def __init__(self, edges: list[PGEdge], cfg: SolverConfig):
        self.edges = edges
        n = len(edges)
        self.ii = np.array([e.i for e in edges], dtype=int)
        self.jj = np.array([e.j for e in edges], dtype=int)
        self.z = np.array([[e.measurement.x, e.measurement.y, e.measurement.theta] for e in edges]).reshape(n, 3)
        self.info = np.array([e.information for e in edges]).reshape(n, 3, 3)
        # odometry is trusted and never robust-scaled
        self.robust = np.array(
            [
                e.robust and e.kind in cfg.robust_kinds and e.kind is not ConstraintKind.ODOMETRY
                for e in edges
            ],
            dtype=bool,
        )


def _edge_residuals(poses: np.ndarray, tbl: _EdgeTable) -> np.ndarray:
    pi = poses[tbl.ii]
    pj = poses[tbl.jj]
    dx = pj[:, 0] - pi[:, 0]
    dy = pj[:, 1] - pi[:, 1]
    ci, si = np.cos(pi[:, 2]), np.sin(pi[:, 2])
    te_x = ci * dx + si * dy
    te_y = -si * dx + ci * dy
    cz, sz = np.cos(tbl.z[:, 2]), np.sin(tbl.z[:, 2])
    ax = te_x - tbl.z[:, 0]
    ay = te_y - tbl.z[:, 1]
    r = np.empty((len(tbl.ii), 3))
    r[:, 0] = cz * ax + sz * ay
    r[:, 1] = -sz * ax + cz * ay
    r[:, 2] = wrap_angles(pj[:, 2] - pi[:, 2] - tbl.z[:, 2])
    return r


def _edge_jacobians(poses: np.ndarray, tbl: _EdgeTable) -> tuple[np.ndarray, np.ndarray]:
    e = len(tbl.ii)
    pi = poses[tbl.ii]
    pj = poses[tbl.jj]
    dx = pj[:, 0] - pi[:, 0]
    dy = pj[:, 1] - pi[:, 1]
    ci, si = np.cos(pi[:, 2]), np.sin(pi[:, 2])
    cz, sz = np.cos(tbl.z[:, 2]), np.sin(tbl.z[:, 2])
    phi = pi[:, 2] + tbl.z[:, 2]
    a_c, a_s = np.cos(phi), np.sin(phi)

    u0 = -si * dx + ci * dy
    u1 = -ci * dx - si * dy
    v0 = cz * u0 + sz * u1
    v1 = -sz * u0 + cz * u1

    ji = np.zeros((e, 3, 3))
    jj = np.zeros((e, 3, 3))
    ji[:, 0, 0] = -a_c
    ji[:, 0, 1] = -a_s
    ji[:, 1, 0] = a_s
    ji[:, 1, 1] = -a_c
    ji[:, 0, 2] = v0
    ji[:, 1, 2] = v1
    ji[:, 2, 2] = -1.0
    jj[:, 0, 0] = a_c
    jj[:, 0, 1] = a_s
    jj[:, 1, 0] = -a_s
    jj[:, 1, 1] = a_c
    jj[:, 2, 2] = 1.0
    return ji, jj


def residual(edge: PGEdge, xi: Pose2D, xj: Pose2D) -> np.ndarray:
    """Residual of one edge: translation in the measurement frame, wrapped angle."""
    tbl = _EdgeTable([PGEdge(0, 1, edge.measurement, edge.information, edge.kind)], SolverConfig())
    poses = np.array([xi.as_array(), xj.as_array()])
    return _edge_residuals(poses, tbl)[0]


def residual_jacobians(edge: PGEdge, xi: Pose2D, xj: Pose2D) -> tuple[np.ndarray, np.ndarray]:
    """Analytic d(residual)/d(xi), d(residual)/d(xj) for one edge."""
    tbl = _EdgeTable([PGEdge(0, 1, edge.measurement, edge.information, edge.kind)], SolverConfig())
    poses = np.array([xi.as_array(), xj.as_array()])
    ji, jj = _edge_jacobians(poses, tbl)
    return ji[0], jj[0]


def edge_chi2(edge: PGEdge, pg: PoseGraph) -> float:
    r = residual(edge, pg.node_pose(edge.i), pg.node_pose(edge.j))
    return float(r @ edge.information @ r)


def chi2(pg: PoseGraph) -> float:
    """Total raw (unscaled) weighted squared residual of the graph."""
    if not pg.edges:
        return 0.0
    tbl = _EdgeTable(pg.edges, SolverConfig())
    r = _edge_residuals(pg.poses, tbl)
    return float(np.einsum("ea,eab,eb->", r, tbl.info, r))


def _chi2_per_edge(poses: np.ndarray, tbl: _EdgeTable) -> np.ndarray:
    r = _edge_residuals(poses, tbl)
    return np.einsum("ea,eab,eb->e", r, tbl.info, r)


def _robust_objective(chi2_e: np.ndarray, tbl: _EdgeTable, phi: float) -> float:
    return float(np.where(tbl.robust, np.minimum(chi2_e, phi), chi2_e).sum())


def _scales(chi2_e: np.ndarray, tbl: _EdgeTable, phi: float) -> np.ndarray:
    s = np.minimum(1.0, 2.0 * phi / (phi + chi2_e))
    return np.where(tbl.robust, s, 1.0)


def check_connected(n_nodes: int, edges: list[PGEdge]) -> None:
    """BFS from node 0; raises listing unreachable nodes."""
    adj: list[list[int]] = [[] for _ in range(n_nodes)]
    for e in edges:
        adj[e.i].append(e.j)
        adj[e.j].append(e.i)
    seen = np.zeros(n_nodes, dtype=bool)
    stack = [0]
    seen[0] = True
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if not seen[v]:
                seen[v] = True
                stack.append(v)
    if not seen.all():
        missing = np.nonzero(~seen)[0]
        shown = ", ".join(map(str, missing[:10]))
        more = "" if len(missing) <= 10 else f" (+{len(missing) - 10} more)"
        raise ValueError(f"graph disconnected; unreachable nodes: {shown}{more}")


def _linear_initialize(poses: np.ndarray, tbl: _EdgeTable, free: np.ndarray, phi: float) -> np.ndarray:
    """Two-stage linear warm start for badly drifted graphs.

    First a robustly reweighted linear estimate of the heading corrections
    (headings enter relative-angle constraints linearly modulo wrapping),
    then, with headings fixed, a linear least-squares position solve. Both
    stages use DCS weights so wrong matches cannot steer the warm start.
    This is initialization only; the nonlinear solver refines from here.
    """
    poses = poses.copy()
    n = len(poses)
    var = -np.ones(n, dtype=int)
    var[free] = np.arange(int(free.sum()))
    nv = int(free.sum())
    ii, jj = tbl.ii, tbl.jj
    vi, vj = var[ii], var[jj]
    w_th = tbl.info[:, 2, 2]

    def unwrapped_targets(r_wrapped: np.ndarray) -> np.ndarray:
        """Pick the 2*pi branch of each closure's heading correction.

        Heading error along the chain can exceed pi, so the wrapped residual
        of a long-range edge may alias. Walking closures in chain order and
        predicting each correction difference from the anchors fixed so far
        keeps every target on the branch consistent with its neighbourhood.
        """
        targets = r_wrapped.copy()
        closures = [k for k in np.argsort(np.maximum(ii, jj)) if jj[k] != ii[k] + 1]
        anchor_pos = [0]
        anchor_val = [0.0]
        for k in closures:
            lo, hi = (ii[k], jj[k]) if ii[k] < jj[k] else (jj[k], ii[k])
            pred = np.interp(hi, anchor_pos, anchor_val) - np.interp(lo, anchor_pos, anchor_val)
            if jj[k] < ii[k]:
                pred = -pred
            branch = round((pred - r_wrapped[k]) / TWO_PI_F)
            targets[k] = r_wrapped[k] + TWO_PI_F * branch
            hi_val = np.interp(lo, anchor_pos, anchor_val) + targets[k] * (1 if jj[k] > ii[k] else -1)
            if hi >= anchor_pos[-1]:
                if hi == anchor_pos[-1]:
                    anchor_val[-1] = 0.5 * (anchor_val[-1] + hi_val)
                else:
                    anchor_pos.append(int(hi))
                    anchor_val.append(float(hi_val))
        return targets

    # graduated schedule: trust everything first (residuals of a drifted graph
    # are all huge, so immediate scaling would zero the warm start), then
    # reweight once inliers have collapsed and outliers stand out
    for pass_idx, phi_k in enumerate((1e9, 100.0 * phi, phi)):
        r_th = wrap_angles(tbl.z[:, 2] - (poses[jj, 2] - poses[ii, 2]))
        r_eff = unwrapped_targets(r_th) if pass_idx == 0 else r_th
        s = _scales(w_th * r_th**2, tbl, phi_k) ** 2
        w = w_th * s
        rows, cols, vals, b = [], [], [], np.zeros(nv)
        for sign_a, va in ((1.0, vj), (-1.0, vi)):
            m = va >= 0
            np.add.at(b, va[m], sign_a * w[m] * r_eff[m])
            rows.append(va[m]); cols.append(va[m]); vals.append(w[m])
        both = (vi >= 0) & (vj >= 0)
        rows.append(vi[both]); cols.append(vj[both]); vals.append(-w[both])
        rows.append(vj[both]); cols.append(vi[both]); vals.append(-w[both])
        a = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(nv, nv)).tocsc()
        a = a + sp.identity(nv, format="csc") * 1e-9
        try:
            delta = splu(a).solve(b)
        except RuntimeError:
            return poses
        poses[free, 2] = poses[free, 2] + delta

    ci, si = np.cos(poses[ii, 2]), np.sin(poses[ii, 2])
    px = ci * tbl.z[:, 0] - si * tbl.z[:, 1]
    py = si * tbl.z[:, 0] + ci * tbl.z[:, 1]
    w_t = 0.5 * (tbl.info[:, 0, 0] + tbl.info[:, 1, 1])
    for phi_k in (1e9, phi):
        rx = poses[jj, 0] - poses[ii, 0] - px
        ry = poses[jj, 1] - poses[ii, 1] - py
        s = _scales(w_t * (rx**2 + ry**2), tbl, phi_k) ** 2
        w = w_t * s
        rows, cols, vals = [], [], []
        b = np.zeros(2 * nv)
        for sign_a, va in ((1.0, vj), (-1.0, vi)):
            m = va >= 0
            np.add.at(b, 2 * va[m], sign_a * w[m] * rx[m])
            np.add.at(b, 2 * va[m] + 1, sign_a * w[m] * ry[m])
            for off in (0, 1):
                rows.append(2 * va[m] + off); cols.append(2 * va[m] + off); vals.append(w[m])
        both = (vi >= 0) & (vj >= 0)
        for off in (0, 1):
            rows.append(2 * vi[both] + off); cols.append(2 * vj[both] + off); vals.append(-w[both])
            rows.append(2 * vj[both] + off); cols.append(2 * vi[both] + off); vals.append(-w[both])
        a = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(2 * nv, 2 * nv)).tocsc()
        a = a + sp.identity(2 * nv, format="csc") * 1e-9
        try:
            delta = splu(a).solve(-b)
        except RuntimeError:
            return poses
        poses[free, 0] += delta[0::2]
        poses[free, 1] += delta[1::2]
    return poses


def _solve_core(
    poses: np.ndarray, tbl: _EdgeTable, free: np.ndarray, cfg: SolverConfig,
    linear_init: bool = False,
) -> tuple[np.ndarray, SolveReport]:
    poses = poses.copy()
    phi = cfg.dcs_phi
    n_free = int(free.sum())
    chi2_e = _chi2_per_edge(poses, tbl)
    f_initial = _robust_objective(chi2_e, tbl, phi)
    if n_free == 0 or len(tbl.ii) == 0:
        return poses, SolveReport(f_initial, f_initial, 0, _scales(chi2_e, tbl, phi), True)

    has_closures = bool(tbl.robust.any())
    if linear_init and has_closures and f_initial > 1e-9:
        # gate on the raw objective: a useful warm start bends the odometry
        # chain (raising the saturated robust objective transiently) but must
        # reduce the total unscaled error
        warm = _linear_initialize(poses, tbl, free, phi)
        if _chi2_per_edge(warm, tbl).sum() < chi2_e.sum():
            poses = warm
            chi2_e = _chi2_per_edge(poses, tbl)

    var = -np.ones(len(free), dtype=int)
    var[free] = np.arange(n_free)
    nv = 3 * n_free

    # static sparsity pattern: the four 3x3 blocks of every edge
    vi, vj = var[tbl.ii], var[tbl.jj]
    blk_r, blk_c = np.meshgrid(np.arange(3), np.arange(3), indexing="ij")

    def block_idx(vr, vc):
        rows = (3 * vr[:, None, None] + blk_r[None]).ravel()
        cols = (3 * vc[:, None, None] + blk_c[None]).ravel()
        return rows, cols

    lam = cfg.damping
    converged = False
    iterations = 0
    for iterations in range(1, cfg.max_iterations + 1):
        r = _edge_residuals(poses, tbl)
        chi2_e = np.einsum("ea,eab,eb->e", r, tbl.info, r)
        s = _scales(chi2_e, tbl, phi)
        w_info = tbl.info * (s**2)[:, None, None]
        q_cur = float((s**2 * chi2_e).sum())
        if q_cur <= 1e-24:  # already consistent; nothing to do
            converged = True
            break

        ji, jj = _edge_jacobians(poses, tbl)
        wji = np.einsum("eab,ebc->eac", w_info, ji)
        wjj = np.einsum("eab,ebc->eac", w_info, jj)
        h_ii = np.einsum("eba,ebc->eac", ji, wji)
        h_ij = np.einsum("eba,ebc->eac", ji, wjj)
        h_jj = np.einsum("eba,ebc->eac", jj, wjj)
        g_i = np.einsum("eba,eb->ea", wji, r)
        g_j = np.einsum("eba,eb->ea", wjj, r)

        rows, cols, vals = [], [], []
        mi, mj = vi >= 0, vj >= 0
        for mask, vr, vc, blocks in (
            (mi, vi, vi, h_ii),
            (mi & mj, vi, vj, h_ij),
            (mi & mj, vj, vi, np.transpose(h_ij, (0, 2, 1))),
            (mj, vj, vj, h_jj),
        ):
            if mask.any():
                rr, cc = block_idx(vr[mask], vc[mask])
                rows.append(rr)
                cols.append(cc)
                vals.append(blocks[mask].ravel())
        h = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(nv, nv),
        ).tocsc()

        b = np.zeros(nv)
        if mi.any():
            np.add.at(b, (3 * vi[mi, None] + np.arange(3)).ravel(), g_i[mi].ravel())
        if mj.any():
            np.add.at(b, (3 * vj[mj, None] + np.arange(3)).ravel(), g_j[mj].ravel())

        diag = h.diagonal()
        accepted = False
        for _ in range(25):
            h_damped = h + sp.diags(np.maximum(lam * diag, 1e-12))
            try:
                delta = splu(h_damped).solve(-b)
            except RuntimeError as exc:
                raise ValueError(f"normal equations singular (graph under-constrained): {exc}") from exc
            cand = poses.copy()
            cand[free, 0] += delta[0::3]
            cand[free, 1] += delta[1::3]
            cand[free, 2] = wrap_angles(cand[free, 2] + delta[2::3])
            chi2_cand = _chi2_per_edge(cand, tbl)
            q_new = float((s**2 * chi2_cand).sum())
            if q_new < q_cur:
                accepted = True
                poses = cand
                chi2_e = chi2_cand
                lam = max(lam / 10.0, 1e-12)
                break
            lam *= 10.0
            if lam > 1e12:
                break
        if not accepted:
            converged = True  # no downhill step exists at this linearization
            break
        if (q_cur - q_new) / max(q_cur, 1e-300) < cfg.chi2_rel_tol:
            converged = True
            break

    f_final = _robust_objective(chi2_e, tbl, phi)
    return poses, SolveReport(f_initial, f_final, iterations, _scales(chi2_e, tbl, phi), converged)


def solve_batch(pg: PoseGraph, cfg: SolverConfig | None = None, fixed=(0,)) -> tuple[PoseGraph, SolveReport]:
    """Levenberg-Marquardt over the whole graph with the gauge node fixed."""
    cfg = cfg or SolverConfig()
    check_connected(pg.n_nodes, pg.edges)
    tbl = _EdgeTable(pg.edges, cfg)
    free = np.ones(pg.n_nodes, dtype=bool)
    for f in fixed:
        free[f] = False
    poses, report = _solve_core(pg.poses, tbl, free, cfg, linear_init=True)
    return PoseGraph(poses, list(pg.labels), list(pg.edges)), report


class IncrementalSolver:
    """Streaming front end over the batch core.

    Nodes must arrive in id order, each (after the first) with its odometry
    edge; the estimate is extended by dead reckoning. A local solve over the
    trailing 3 * period nodes runs every ``incremental_batch_period`` nodes,
    and any batch of loop/Manhattan edges triggers a full relinearized solve.
    """

    def __init__(self, cfg: SolverConfig | None = None):
        self.cfg = cfg or SolverConfig()
        self.poses: list[np.ndarray] = []
        self.labels: list = []
        self.edges: list[PGEdge] = []
        self.reports: list[SolveReport] = []
        self._since_solve = 0

    @property
    def n_nodes(self) -> int:
        return len(self.poses)

    def add_node(self, node_id: int, odom: PGEdge | None, initial: Pose2D | None = None, label=None) -> None:
        if node_id != self.n_nodes:
            raise ValueError(f"out-of-order node {node_id}; expected {self.n_nodes}")
        if node_id == 0:
            pose = initial or Pose2D()
            self.poses.append(pose.as_array())
        else:
            if odom is None or odom.kind is not ConstraintKind.ODOMETRY or odom.j != node_id:
                raise ValueError(f"node {node_id} needs its odometry edge {node_id - 1}->{node_id}")
            prev = Pose2D.from_array(self.poses[-1])
            self.poses.append(compose(prev, odom.measurement).as_array())
            self.edges.append(odom)
        self.labels.append(label)
        self._since_solve += 1
        if self._since_solve >= self.cfg.incremental_batch_period and self.n_nodes > 2:
            self._local_solve()
            self._since_solve = 0

    def add_edges(self, batch: list[PGEdge]) -> None:
        for e in batch:
            if e.i >= self.n_nodes or e.j >= self.n_nodes:
                raise ValueError(f"edge {e.i}->{e.j} references a future node")
        self.edges.extend(batch)
        if batch:
            self._full_solve()

    def _local_solve(self) -> None:
        window = 3 * self.cfg.incremental_batch_period
        free = np.zeros(self.n_nodes, dtype=bool)
        free[max(1, self.n_nodes - window):] = True
        poses = np.array(self.poses)
        tbl = _EdgeTable(self.edges, self.cfg)
        new_poses, report = _solve_core(poses, tbl, free, self.cfg)
        self.poses = list(new_poses)
        self.reports.append(report)

    def _full_solve(self) -> None:
        poses = np.array(self.poses)
        free = np.ones(self.n_nodes, dtype=bool)
        free[0] = False
        tbl = _EdgeTable(self.edges, self.cfg)
        new_poses, report = _solve_core(poses, tbl, free, self.cfg, linear_init=True)
        self.poses = list(new_poses)
        self.reports.append(report)

    def graph(self) -> PoseGraph:
        labels = [lab for lab in self.labels]
        if any(lab is None for lab in labels):
            labels = []
        return PoseGraph(np.array(self.poses), labels, list(self.edges))


def solve_incremental(events, cfg: SolverConfig | None = None) -> tuple[PoseGraph, list[SolveReport]]:
    """Drive an :class:`IncrementalSolver` from a stream of events.

    Events are ("node", id, odometry_edge_or_None) and ("edges", [PGEdge...]).
    The final estimate agrees with a one-shot batch solve of the same graph.
    """
    solver = IncrementalSolver(cfg)
    for ev in events:
        if ev[0] == "node":
            initial = ev[3] if len(ev) > 3 else None
            solver.add_node(ev[1], ev[2], initial=initial)
        elif ev[0] == "edges":
            solver.add_edges(list(ev[1]))
        else:
            raise ValueError(f"unknown event {ev[0]!r}")
    return solver.graph(), solver.reports


def graph_events(pg: PoseGraph):
    """Replay a finished graph as an incremental event stream.

    Nodes go in id order with their odometry edges; every other edge is
    batched right after its later endpoint appears.
    """
    odo = {e.j: e for e in pg.edges if e.kind is ConstraintKind.ODOMETRY}
    extra: dict[int, list[PGEdge]] = {}
    for e in pg.edges:
        if e.kind is not ConstraintKind.ODOMETRY:
            extra.setdefault(max(e.i, e.j), []).append(e)
    events = []
    for i in range(pg.n_nodes):
        events.append(("node", i, odo.get(i), pg.node_pose(0) if i == 0 else None))
        if i in extra:
            events.append(("edges", extra[i]))
    return events
