"""Command-line interface: generate | run | evaluate | plot | export-g2o.

Exit codes: 0 success, 1 usage error, 2 data error. All randomness flows from
a single seed (flag > config file > MANHATTAN_SLAM_SEED env var > default 0);
repeated runs with the same inputs produce byte-identical files.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .metrics import ate
from .pose_graph import GraphParseError, PoseGraph, load_graph_file, save_graph_file
from .rendering import svg_plot
from .simulator import NoiseModel, corrupt, default_plan, generate_layout, generate_trajectory
from .pose_graph import TopoLabel


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; usage errors are 1 here
        self.exit(1, f"{self.prog}: error: {message}\n")


_CONFIG_KEYS = {f.name for f in dataclasses.fields(pl.PipelineConfig)} | {"seed"}


def _load_config(path: str) -> dict:
    values: dict = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise FileNotFoundError(path) from None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, val = (t.strip() for t in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = val
    return values


def _coerce(cfg_field, raw: str):
    if cfg_field.type in ("int", "int | None"):
        return int(raw)
    if cfg_field.type == "bool":
        return raw.lower() in ("1", "true", "yes", "on")
    return float(raw)


def _build_pipeline_config(args, file_values: dict) -> pl.PipelineConfig:
    cfg = pl.PipelineConfig()
    fields = {f.name: f for f in dataclasses.fields(pl.PipelineConfig)}
    for name, f in fields.items():
        flag_val = getattr(args, name, None)
        if flag_val is not None:
            setattr(cfg, name, flag_val)
        elif name in file_values:
            setattr(cfg, name, _coerce(f, file_values[name]))
    return cfg


def _resolve_seed(args, file_values: dict) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    if "seed" in file_values:
        return int(file_values["seed"])
    env = os.environ.get("MANHATTAN_SLAM_SEED")
    return int(env) if env else 0


def _add_sim_flags(p):
    p.add_argument("--n-racks", dest="n_racks", type=int, help="racks in the layout (default 21)")
    p.add_argument("--aisle-width", dest="aisle_width", type=float, help="aisle width, m (default 0.6)")
    p.add_argument("--width", type=float, help="warehouse width, m (default 30)")
    p.add_argument("--height", type=float, help="warehouse height, m (default 50)")
    p.add_argument("--plan-stride", dest="plan_stride", type=int, help="visit every k-th aisle (default 4)")
    p.add_argument("--plan-count", dest="plan_count", type=int, help="aisles per sweep (default 4)")
    p.add_argument("--label-error-rate", dest="label_error_rate", type=float, help="label flip probability (default 0.06)")
    p.add_argument("--beams", type=int, help="scan beams per node (default 90)")
    p.add_argument("--max-range", dest="max_range", type=float, help="scan range, m (default 10)")


def _add_solver_flags(p):
    p.add_argument("--phi", type=float, help="DCS kernel parameter (default 1.0)")
    p.add_argument("--no-robust", dest="robust", action="store_const", const=False,
                   help="disable the robust kernel")
    p.add_argument("--max-iters", dest="max_iterations", type=int, help="solver iteration cap (default 100)")
    p.add_argument("--mode", choices=["batch", "incremental"], default=None,
                   help="solver mode for single-stage runs (default batch)")


def _add_mlp_flags(p):
    p.add_argument("--mlp-seed", dest="mlp_seed", type=int, help="override comparator training seed")
    p.add_argument("--mlp-epochs", dest="mlp_epochs", type=int, help="training epochs (default 200)")
    p.add_argument("--tau-high", dest="tau_high", type=float, help="high-confidence distance threshold (default 0.5)")
    p.add_argument("--tau-low", dest="tau_low", type=float, help="low-confidence distance threshold (default 0.8)")


def build_parser() -> _Parser:
    parser = _Parser(prog="manhattan-slam", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[], help="simulate a warehouse run", parser_class=_Parser)
    g.add_argument("--seed", type=int, help="simulation seed (default: env MANHATTAN_SLAM_SEED or 0)")
    g.add_argument("--out", default=".", help="output directory (default .)")
    g.add_argument("--config", help="flat key = value config file")
    _add_sim_flags(g)

    r = sub.add_parser("run", help="run pipeline stages and write the report", parser_class=_Parser)
    r.add_argument("--stage", default="all",
                   choices=[s.value for s in pl.StageId] + ["all"],
                   help="stage to run (default all)")
    r.add_argument("--seeds", type=int, default=1, help="number of seeds (default 1)")
    r.add_argument("--seed", type=int, help="base seed (default: env MANHATTAN_SLAM_SEED or 0)")
    r.add_argument("--out", default=".", help="output directory (default .)")
    r.add_argument("--config", help="flat key = value config file")
    r.add_argument("--robustness", help="comma list of outlier fractions; writes robustness.csv")
    _add_sim_flags(r)
    _add_solver_flags(r)
    _add_mlp_flags(r)

    e = sub.add_parser("evaluate", help="absolute trajectory error of an estimate", parser_class=_Parser)
    e.add_argument("--est", required=True, help="estimated graph file")
    e.add_argument("--truth", required=True, help="truth CSV (node_id,x,y,theta,label)")
    e.add_argument("--out", default=".", help="directory for ate_per_node.csv (default .)")

    p = sub.add_parser("plot", help="render graphs to SVG", parser_class=_Parser)
    p.add_argument("graphs", nargs="+", help="graph files to overlay")
    p.add_argument("--truth", help="optional truth CSV to overlay")
    p.add_argument("--out", default="plot.svg", help="output SVG path (default plot.svg)")

    x = sub.add_parser("export-g2o", help="re-emit a graph file", parser_class=_Parser)
    x.add_argument("--in", dest="src", required=True, help="input graph file")
    x.add_argument("--out", dest="dst", required=True, help="output graph file")
    x.add_argument("--plain-g2o", action="store_true",
                   help="drop KIND tokens and labels for standard-tool interop")
    return parser


def _read_truth_csv(path: str) -> tuple[np.ndarray, list]:
    rows = []
    labels = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("node_id"):
            raise ValueError(f"{path}: expected header starting with node_id")
        for raw in fh:
            parts = raw.strip().split(",")
            if len(parts) < 4:
                continue
            rows.append([float(parts[1]), float(parts[2]), float(parts[3])])
            labels.append(parts[4] if len(parts) > 4 else "")
    return np.array(rows), labels


def cmd_generate(args) -> int:
    file_values = _load_config(args.config) if args.config else {}
    cfg = _build_pipeline_config(args, file_values)
    seed = _resolve_seed(args, file_values)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    layout = generate_layout(n_racks=cfg.n_racks, aisle_width=cfg.aisle_width,
                             width=cfg.width, height=cfg.height, seed=seed)
    plan = default_plan(layout, stride=cfg.plan_stride, count=cfg.plan_count)
    truth = generate_trajectory(layout, plan, step=cfg.step)
    noise = NoiseModel(
        odom_sigma=(cfg.sigma_x, cfg.sigma_y, cfg.sigma_theta),
        drift_bias=(cfg.bias_x, cfg.bias_y, cfg.bias_theta),
        label_error_rate=cfg.label_error_rate,
        scan_range_sigma=cfg.scan_sigma,
        rng_seed=seed,
    )
    graph, scans = corrupt(truth, layout, noise, beams=cfg.beams, max_range=cfg.max_range)

    save_graph_file(graph, out / "graph.g2o")
    with open(out / "truth.csv", "w", encoding="utf-8") as fh:
        fh.write("node_id,x,y,theta,label\n")
        for i in range(truth.n_poses):
            x, y, t = truth.poses[i]
            fh.write(f"{i},{x!r},{y!r},{t!r},{truth.labels[i].value}\n")
    with open(out / "scans.csv", "w", encoding="utf-8") as fh:
        fh.write("node_id,beam_index,x,y\n")
        for i, scan in enumerate(scans):
            for b, (px, py) in zip(scan.beam_indices, scan.points):
                fh.write(f"{i},{b},{px!r},{py!r}\n")
    print(f"wrote graph.g2o, truth.csv, scans.csv to {out} ({truth.n_poses} nodes)")
    return 0


def cmd_run(args) -> int:
    file_values = _load_config(args.config) if args.config else {}
    cfg = _build_pipeline_config(args, file_values)
    base_seed = _resolve_seed(args, file_values)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    stages = pl.STAGE_ORDER if args.stage == "all" else [pl.StageId(args.stage)]
    seeds = [base_seed + k for k in range(args.seeds)]
    results = pl.run_ladder(cfg, seeds, stages)

    (out / "ladder.csv").write_text(pl.ladder_csv(results), encoding="utf-8")
    (out / "feedback.csv").write_text(pl.feedback_csv(results), encoding="utf-8")
    for seed in seeds:
        for stage, res in results[seed].items():
            save_graph_file(res.graph, out / f"stage_{stage.value}_seed{seed}.g2o")
        scenario_truth = None
        first = results[seed].get(pl.StageId.UNOPTIMIZED)
        last_stage = [s for s in stages if s in results[seed]][-1]
        series = []
        if first is not None:
            series.append(("unoptimized", first.graph.poses[:, :2]))
        if last_stage is not pl.StageId.UNOPTIMIZED:
            series.append((last_stage.value, results[seed][last_stage].graph.poses[:, :2]))
        scenario = pl.build_scenario(cfg, seed, with_scans=False)
        series.append(("truth", scenario.truth.poses[:, :2]))
        (out / f"trajectory_seed{seed}.svg").write_text(svg_plot(series), encoding="utf-8")

    if args.robustness:
        fractions = [float(t) for t in args.robustness.split(",") if t.strip()]
        rows = pl.robustness_sweep(cfg, fractions, seeds)
        (out / "robustness.csv").write_text(pl.robustness_csv(rows), encoding="utf-8")

    for seed in seeds:
        for stage in stages:
            if stage in results[seed]:
                print(f"seed {seed} {stage.value}: ate {results[seed][stage].ate.rmse:.3f} m")
    return 0


def cmd_evaluate(args) -> int:
    graph = load_graph_file(args.est)
    truth, _ = _read_truth_csv(args.truth)
    if truth.shape[0] != graph.n_nodes:
        raise ValueError(
            f"node count mismatch: {graph.n_nodes} estimated vs {truth.shape[0]} truth"
        )
    result = ate(graph, truth)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ate_per_node.csv", "w", encoding="utf-8") as fh:
        fh.write("node_id,trans_err,rot_err\n")
        aligned_rot = result.alignment.theta
        for i, err in enumerate(result.errors):
            dth = graph.poses[i, 2] + aligned_rot - truth[i, 2]
            dth = float(np.arctan2(np.sin(dth), np.cos(dth)))
            fh.write(f"{i},{err:.9f},{dth:.9f}\n")
    print(f"rmse {result.rmse:.3f}")
    if result.rot_rmse is not None:
        print(f"rot_rmse {result.rot_rmse:.3f}")
    return 0


def cmd_plot(args) -> int:
    series = []
    for path in args.graphs:
        g = load_graph_file(path)
        series.append((Path(path).stem, g.poses[:, :2]))
    if args.truth:
        truth, _ = _read_truth_csv(args.truth)
        series.append(("truth", truth[:, :2]))
    svg = svg_plot(series)
    Path(args.out).write_text(svg, encoding="utf-8")
    print(f"wrote {args.out}")
    return 0


def cmd_export(args) -> int:
    g = load_graph_file(args.src)
    save_graph_file(
        g, args.dst, include_kind=not args.plain_g2o, include_labels=not args.plain_g2o
    )
    print(f"wrote {args.dst}")
    return 0


_COMMANDS = {
    "generate": cmd_generate,
    "run": cmd_run,
    "evaluate": cmd_evaluate,
    "plot": cmd_plot,
    "export-g2o": cmd_export,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except FileNotFoundError as exc:
        name = exc.filename or str(exc)
        print(f"error: file not found: {name}", file=sys.stderr)
        return 2
    except (GraphParseError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
