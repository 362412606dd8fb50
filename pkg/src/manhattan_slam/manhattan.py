"""Rectified Manhattan graph built over topologically labeled segments.

One meta-node per rackspace/corridor region: an integrated segment length, a
heading snapped to the quarter-turn grid, and endpoint coordinates chained in
a rectified frame anchored at the first segment. Intersection regions do not
become meta-nodes; they contribute the binned turn angle between their
neighbours plus a translation of the chain by their integrated displacement.

Headings are tracked as integer quarter turns so axis alignment of the
rectified chain is exact by construction, not up to floating-point cosines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .pose_graph import Pose2D, PoseGraph, TopoLabel, wrap_angle, wrap_angles
from .topology import TopologicalGraph

HALF_PI = math.pi / 2.0

# quarter-turn index -> exact axis direction
_DIR = {0: (1.0, 0.0), 1: (0.0, 1.0), 2: (-1.0, 0.0), -1: (0.0, -1.0)}


def bin_quarter(phi: float) -> int:
    """Snap an angle in (-pi, pi] to a quarter-turn index in {-1, 0, 1, 2}.

    Exact midpoints (odd multiples of pi/4) round away from zero; angles
    nearest -pi map to +2 (i.e. pi).
    """
    k = phi / HALF_PI
    n = int(math.copysign(math.floor(abs(k) + 0.5), k))
    return 2 if n == -2 else n


def bin_angle(phi: float) -> float:
    """Snap an angle to the nearest of {-pi/2, 0, pi/2, pi}."""
    return bin_quarter(phi) * HALF_PI


def quarter_heading(q: int) -> float:
    return q * HALF_PI


@dataclass
class MetaNode:
    """A contiguous same-label pose-graph segment in the rectified frame."""

    id: int
    label: TopoLabel
    pg_start: int
    pg_end: int  # inclusive
    length: float
    quarter: int  # heading as quarter turns, in {-1, 0, 1, 2}
    x_start: float
    y_start: float
    x_end: float
    y_end: float
    offsets: np.ndarray = field(repr=False, default=None)  # arc length per node

    @property
    def heading(self) -> float:
        return quarter_heading(self.quarter)

    @property
    def collection(self) -> range:
        return range(self.pg_start, self.pg_end + 1)

    @property
    def n_nodes(self) -> int:
        return self.pg_end - self.pg_start + 1


@dataclass
class ManhattanGraph:
    meta_nodes: list[MetaNode]
    turns: list[float]  # binned angle between consecutive meta-nodes

    @property
    def edges(self) -> list[tuple[int, int, float]]:
        return [(k, k + 1, self.turns[k]) for k in range(len(self.turns))]


def segment_length(pg: PoseGraph, pg_start: int, pg_end: int, use_estimate: bool = False) -> float:
    """Integrated travel between two node ids of one region.

    By default sums the translation norms of the odometry edges spanning the
    range (raises if one is missing); with ``use_estimate`` it integrates the
    current pose estimates instead, which is what the feedback loop relies on.
    """
    if not 0 <= pg_start <= pg_end < pg.n_nodes:
        raise ValueError(f"bad node range {pg_start}..{pg_end}")
    if pg_start == pg_end:
        return 0.0
    if use_estimate:
        steps = np.diff(pg.poses[pg_start : pg_end + 1, :2], axis=0)
        return float(np.linalg.norm(steps, axis=1).sum())
    odo = {e.i: e for e in pg.edges if e.kind.name == "ODOMETRY"}
    total = 0.0
    for i in range(pg_start, pg_end):
        if i not in odo:
            raise ValueError(f"missing odometry edge {i}->{i + 1}")
        m = odo[i].measurement
        total += math.hypot(m.x, m.y)
    return total


def build_manhattan(pg: PoseGraph, tg: TopologicalGraph) -> ManhattanGraph:
    """Construct the rectified Manhattan graph from the current pose estimates.

    Turn angles between consecutive non-intersection regions are the heading
    change integrated across the intervening nodes and snapped to the quarter
    grid; the first segment's heading defines the canonical frame (0). The
    chain therefore improves whenever the underlying estimates improve.
    """
    if not tg.regions:
        raise ValueError("empty topological graph")
    kept = [r for r in tg.regions if r.label is not TopoLabel.INTERSECTION]
    if not kept:
        raise ValueError("no rackspace or corridor regions to build from")

    steps = np.diff(pg.poses[:, :2], axis=0)
    step_len = np.linalg.norm(steps, axis=1)
    cum_len = np.concatenate([[0.0], np.cumsum(step_len)])

    def mean_heading(region) -> float:
        th = pg.poses[region.pg_start : region.pg_end + 1, 2]
        return math.atan2(float(np.sin(th).sum()), float(np.cos(th).sum()))

    metas: list[MetaNode] = []
    turns: list[float] = []
    q = 0
    cx, cy = 0.0, 0.0
    for idx, region in enumerate(kept):
        if idx > 0:
            prev = kept[idx - 1]
            # the dominant-heading change is robust to a stray corner pose
            # straddling a region boundary, unlike the endpoint difference
            turn_raw = wrap_angle(mean_heading(region) - mean_heading(prev))
            dq = bin_quarter(turn_raw)
            # gap chord in the previous segment's frame; keeping both
            # components is what makes opposite traversals of one aisle land
            # on the same rectified rail
            gx, gy = pg.poses[region.pg_start, :2] - pg.poses[prev.pg_end, :2]
            mh = mean_heading(prev)
            c, s = math.cos(mh), math.sin(mh)
            u, v = c * gx + s * gy, -s * gx + c * gy
            ax, ay = _DIR[q]
            lx, ly = _DIR[((q + 2) % 4) - 1]  # left-perpendicular
            cx, cy = cx + u * ax + v * lx, cy + u * ay + v * ly
            q = ((q + dq + 1) % 4) - 1
            turns.append(quarter_heading(dq))

        offsets = cum_len[region.pg_start : region.pg_end + 1] - cum_len[region.pg_start]
        length = float(offsets[-1])
        dx, dy = _DIR[q]
        meta = MetaNode(
            id=len(metas),
            label=region.label,
            pg_start=region.pg_start,
            pg_end=region.pg_end,
            length=length,
            quarter=q,
            x_start=cx,
            y_start=cy,
            x_end=cx + length * dx,
            y_end=cy + length * dy,
            offsets=offsets,
        )
        metas.append(meta)
        cx, cy = meta.x_end, meta.y_end
    return ManhattanGraph(metas, turns)


def rectified_node_pose(meta: MetaNode, node_id: int) -> Pose2D:
    """Pose of a pose-graph node in the rectified Manhattan frame."""
    if not meta.pg_start <= node_id <= meta.pg_end:
        raise ValueError(f"node {node_id} not in meta-node {meta.id}")
    off = float(meta.offsets[node_id - meta.pg_start])
    dx, dy = _DIR[meta.quarter]
    return Pose2D(meta.x_start + off * dx, meta.y_start + off * dy, meta.heading)


def manhattan_csv(mg: ManhattanGraph) -> str:
    lines = ["meta_id,label,pg_start,pg_end,length,heading,x_start,y_start,x_end,y_end"]
    for m in mg.meta_nodes:
        lines.append(
            f"{m.id},{m.label.value},{m.pg_start},{m.pg_end},{m.length:.6f},"
            f"{m.heading:.10f},{m.x_start:.6f},{m.y_start:.6f},{m.x_end:.6f},{m.y_end:.6f}"
        )
    return "\n".join(lines) + "\n"
