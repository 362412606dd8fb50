"""Synthetic warehouse worlds: layouts, trajectories, drifting odometry, scans.

The simulator stands in for the data acquisition that would normally feed the
pipeline: a layout generator, a boustrophedon route planner, an odometry
corruption model (Gaussian noise plus a constant per-step bias, which is what
produces the systematic bending of dead-reckoned maps), a per-node label
oracle with a configurable error rate standing in for a frame classifier, and
a 2D ray caster producing scans from the true poses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .pose_graph import (
    Pose2D,
    PoseGraph,
    TopoLabel,
    between,
    compose,
    odometry_edge,
    wrap_angle,
)


@dataclass(frozen=True)
class Rect:
    x0: float
    y0: float
    x1: float
    y1: float

    def contains(self, x: float, y: float) -> bool:
        return self.x0 < x < self.x1 and self.y0 < y < self.y1

    def overlaps(self, other: "Rect") -> bool:
        return (
            self.x0 < other.x1 and other.x0 < self.x1
            and self.y0 < other.y1 and other.y0 < self.y1
        )


@dataclass
class NoiseModel:
    """Per-step odometry corruption, label error rate, and scan range noise."""

    odom_sigma: tuple[float, float, float] = (0.008, 0.004, 0.035)
    drift_bias: tuple[float, float, float] = (0.0008, 0.0, 0.0012)
    label_error_rate: float = 0.06
    scan_range_sigma: float = 0.02
    rng_seed: int = 0

    def __post_init__(self):
        if any(s < 0 for s in self.odom_sigma) or self.scan_range_sigma < 0:
            raise ValueError("noise sigmas must be non-negative")
        if not 0.0 <= self.label_error_rate < 1.0:
            raise ValueError("label_error_rate must be in [0, 1)")


@dataclass
class Scan:
    """Ray-cast hit points in the sensor frame."""

    points: np.ndarray  # (m, 2)
    beam_indices: np.ndarray  # (m,)
    beam_count: int
    max_range: float


@dataclass
class WarehouseLayout:
    """Axis-aligned warehouse geometry plus the position -> label region map.

    Racks run in parallel rows with an aisle on both sides of every rack;
    corridors run along the bottom and top boundaries. The intersection
    regions are the aisle mouths: vertical strips where an aisle opens into a
    corridor, extending down to (but not onto) the corridor travel line so
    that driving past other aisles does not shatter a corridor region.
    """

    width: float
    height: float
    racks: list[Rect]
    aisle_x: np.ndarray
    aisle_width: float
    rack_band: tuple[float, float]
    travel_y: tuple[float, float]
    mouth_low: tuple[float, float]
    mouth_high: tuple[float, float]
    seed: int = 0
    _rects: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.aisle_x = np.asarray(self.aisle_x, dtype=float)
        if self._rects is None:
            self._rects = (
                np.array([[r.x0, r.y0, r.x1, r.y1] for r in self.racks]).reshape(-1, 4)
            )

    @property
    def n_aisles(self) -> int:
        return len(self.aisle_x)

    def region_map(self, x: float, y: float) -> TopoLabel:
        """Topological label of a position; total on the whole bounding box."""
        if len(self.aisle_x):
            k = int(np.argmin(np.abs(self.aisle_x - x)))
            in_aisle = abs(x - self.aisle_x[k]) <= self.aisle_width / 2 + 1e-12
        else:
            in_aisle = False
        if in_aisle and (
            self.mouth_low[0] <= y <= self.mouth_low[1]
            or self.mouth_high[0] <= y <= self.mouth_high[1]
        ):
            return TopoLabel.INTERSECTION
        if y < self.rack_band[0] or y > self.rack_band[1]:
            return TopoLabel.CORRIDOR
        return TopoLabel.RACKSPACE

    def centerlines(self) -> list[tuple[tuple[float, float], tuple[float, float]]]:
        segs = [
            ((x, self.travel_y[0]), (x, self.travel_y[1])) for x in self.aisle_x
        ]
        if len(self.aisle_x):
            x_lo, x_hi = float(self.aisle_x[0]), float(self.aisle_x[-1])
        else:
            x_lo, x_hi = 0.0, self.width
        segs.append(((x_lo, self.travel_y[0]), (x_hi, self.travel_y[0])))
        segs.append(((x_lo, self.travel_y[1]), (x_hi, self.travel_y[1])))
        return segs

    def in_free_space(self, x: float, y: float) -> bool:
        if not (0 < x < self.width and 0 < y < self.height):
            return False
        return not any(r.contains(x, y) for r in self.racks)

    def validate(self) -> None:
        for r in self.racks:
            if r.x0 < -1e-9 or r.y0 < -1e-9 or r.x1 > self.width + 1e-9 or r.y1 > self.height + 1e-9:
                raise ValueError("rack outside bounding box")
        for a in range(len(self.racks)):
            for b in range(a + 1, len(self.racks)):
                if self.racks[a].overlaps(self.racks[b]):
                    raise ValueError(f"racks {a} and {b} overlap")


def generate_layout(
    n_racks: int = 21,
    aisle_width: float = 0.6,
    rack_size: tuple[float, float] | None = None,
    width: float = 30.0,
    height: float = 50.0,
    corridor_margin: float = 2.4,
    seed: int = 0,
    end_jitter: float = 1.5,
    face_jitter: float = 0.12,
    clutter_per_face: int = 3,
) -> WarehouseLayout:
    """Build a rack-row warehouse with n_racks racks and n_racks + 1 aisles.

    Rack faces and ends are jittered (deterministically per seed) and small
    clutter boxes are attached to the faces so that scans taken in different
    aisles are geometrically distinguishable. Raises if the racks cannot fit
    the bounding box.
    """
    if n_racks < 1:
        raise ValueError("n_racks must be >= 1")
    if aisle_width <= 0 or width <= 0 or height <= 0:
        raise ValueError("dimensions must be positive")

    if rack_size is None:
        rack_w = (width - (n_racks + 1) * aisle_width) / n_racks
        rack_h = height - 2 * corridor_margin
    else:
        rack_w, rack_h = rack_size
    if rack_w <= 0.05 or rack_h <= 0.5:
        raise ValueError(
            f"racks overflow bounding box: rack {rack_w:.3f} x {rack_h:.3f} m does not fit"
        )
    block_w = (n_racks + 1) * aisle_width + n_racks * rack_w
    if block_w > width + 1e-9:
        raise ValueError(f"racks overflow bounding box: block width {block_w:.3f} > {width}")
    y0 = (height - rack_h) / 2
    if y0 < 1.2:
        raise ValueError("racks overflow bounding box: no corridor room top/bottom")

    x_off = (width - block_w) / 2
    rng = np.random.default_rng(seed)
    aisle_x = np.array(
        [x_off + aisle_width / 2 + k * (aisle_width + rack_w) for k in range(n_racks + 1)]
    )

    end_j = min(end_jitter, rack_h / 6)
    face_j = min(face_jitter, rack_w / 3)
    racks: list[Rect] = []
    clutter: list[Rect] = []
    for k in range(n_racks):
        bx0 = x_off + aisle_width + k * (aisle_width + rack_w)
        left_in, right_in = rng.uniform(0.0, face_j, size=2)
        lo_in, hi_in = rng.uniform(0.0, end_j, size=2)
        r = Rect(bx0 + left_in, y0 + lo_in, bx0 + rack_w - right_in, y0 + rack_h - hi_in)
        racks.append(r)
        depth = min(0.12, aisle_width / 5)
        span = r.y1 - r.y0
        if span > 4.0:
            for face_x, sign in ((r.x0, -1.0), (r.x1, +1.0)):
                ys = r.y0 + 1.0 + rng.uniform(0.0, span - 2.0, size=clutter_per_face)
                placed: list[Rect] = []
                for yc in ys:
                    x1, x2 = sorted((face_x, face_x + sign * depth))
                    box = Rect(x1, yc - 0.2, x2, yc + 0.2)
                    if not any(box.overlaps(p) for p in placed):
                        placed.append(box)
                clutter.extend(placed)

    travel = y0 / 4
    gap = travel / 6
    mouth_depth = min(1.0, rack_h / 8)
    layout = WarehouseLayout(
        width=width,
        height=height,
        racks=racks + clutter,
        aisle_x=aisle_x,
        aisle_width=aisle_width,
        rack_band=(y0, y0 + rack_h),
        travel_y=(travel, height - travel),
        mouth_low=(travel + gap, y0 + mouth_depth),
        mouth_high=(height - y0 - mouth_depth, height - travel - gap),
        seed=seed,
    )
    layout.validate()
    return layout


@dataclass
class Trajectory:
    """Ground-truth poses with true labels; one row per simulation step."""

    poses: np.ndarray  # (n, 3)
    labels: list[TopoLabel]
    timestamps: np.ndarray

    @property
    def n_poses(self) -> int:
        return self.poses.shape[0]

    def __iter__(self):
        for i in range(self.n_poses):
            yield Pose2D.from_array(self.poses[i]), self.labels[i], float(self.timestamps[i])


def default_plan(layout: WarehouseLayout, stride: int = 4, count: int = 4) -> list[int]:
    """Out-and-back sweep over every ``stride``-th aisle plus a same-direction
    re-entry of the first aisle, so revisits of both relative orientations occur."""
    chosen = list(range(0, layout.n_aisles, stride))[:count]
    if not chosen:
        chosen = [0]
    return chosen + chosen[::-1] + [chosen[0]]


def generate_trajectory(layout: WarehouseLayout, plan: list[int], step: float = 0.25) -> Trajectory:
    """Boustrophedon walk over the planned aisles at fixed step length.

    Each traversal runs the full aisle between the two corridor travel lines;
    between traversals the robot drives along the corridor of the side it is
    on. Consecutive identical plan entries produce an in-place 180 degree
    turnaround, i.e. an opposing-viewpoint revisit.
    """
    if not plan:
        raise ValueError("empty plan")
    for k in plan:
        if not 0 <= k < layout.n_aisles:
            raise ValueError(f"plan references aisle {k}, layout has {layout.n_aisles}")

    y_lines = layout.travel_y
    side = 0
    verts: list[tuple[float, float]] = [(float(layout.aisle_x[plan[0]]), y_lines[0])]
    for k in plan:
        xk = float(layout.aisle_x[k])
        if abs(xk - verts[-1][0]) > 1e-12:
            verts.append((xk, y_lines[side]))
        verts.append((xk, y_lines[1 - side]))
        side = 1 - side

    pts = np.array(verts)
    seg = np.diff(pts, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    keep = seg_len > 1e-12
    seg, seg_len, starts = seg[keep], seg_len[keep], pts[:-1][keep]
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = cum[-1]

    s = np.arange(0.0, total + 1e-9, step)
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg_len) - 1)
    frac = (s - cum[idx]) / seg_len[idx]
    xy = starts[idx] + seg[idx] * frac[:, None]
    theta = np.arctan2(seg[idx, 1], seg[idx, 0])
    poses = np.column_stack([xy, theta])
    labels = [layout.region_map(x, y) for x, y in xy]
    return Trajectory(poses, labels, s.copy())


_OTHER_LABELS = {
    TopoLabel.RACKSPACE: (TopoLabel.CORRIDOR, TopoLabel.INTERSECTION),
    TopoLabel.CORRIDOR: (TopoLabel.RACKSPACE, TopoLabel.INTERSECTION),
    TopoLabel.INTERSECTION: (TopoLabel.RACKSPACE, TopoLabel.CORRIDOR),
}


def corrupt(
    truth: Trajectory,
    layout: WarehouseLayout,
    noise: NoiseModel,
    beams: int = 90,
    max_range: float = 10.0,
    compute_scans: bool = True,
) -> tuple[PoseGraph, list[Scan]]:
    """Produce the drifted odometry-only pose graph plus labels and scans.

    Odometry measurements are the true relative poses plus Gaussian noise and
    the constant per-step bias; node estimates are the dead-reckoned chain of
    those measurements. Labels flip to a uniformly random other label with
    probability ``label_error_rate``. Scans are ray-cast from the TRUE poses
    (the sensor observes the world, not the estimate).
    """
    n = truth.n_poses
    if n < 2:
        raise ValueError("need at least two poses")
    rng = np.random.default_rng(noise.rng_seed)

    sig = np.asarray(noise.odom_sigma)
    bias = np.asarray(noise.drift_bias)
    pert = rng.normal(0.0, 1.0, size=(n - 1, 3)) * sig + bias

    edges = []
    est = np.zeros((n, 3))
    est[0] = truth.poses[0]
    cur = Pose2D.from_array(truth.poses[0])
    for i in range(n - 1):
        rel = between(Pose2D.from_array(truth.poses[i]), Pose2D.from_array(truth.poses[i + 1]))
        meas = Pose2D(rel.x + pert[i, 0], rel.y + pert[i, 1], rel.theta + pert[i, 2])
        edges.append(odometry_edge(i, meas))
        cur = compose(cur, meas)
        est[i + 1] = cur.as_array()

    flips = rng.random(n) < noise.label_error_rate
    picks = rng.integers(0, 2, size=n)
    labels = []
    for i, lab in enumerate(truth.labels):
        labels.append(_OTHER_LABELS[lab][picks[i]] if flips[i] else lab)

    scans: list[Scan] = []
    if compute_scans:
        for i in range(n):
            scans.append(
                raycast(
                    layout,
                    Pose2D.from_array(truth.poses[i]),
                    beams=beams,
                    max_range=max_range,
                    range_sigma=noise.scan_range_sigma,
                    rng=rng,
                )
            )
    return PoseGraph(est, labels, edges), scans


def raycast(
    layout: WarehouseLayout,
    pose: Pose2D,
    beams: int = 90,
    max_range: float = 10.0,
    range_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Scan:
    """Cast ``beams`` evenly spaced rays from the true pose.

    Beam k leaves at sensor angle 2*pi*k/beams; the return is the first rack
    or boundary intersection within ``max_range`` (beams that hit nothing in
    range are dropped). Range noise is clamped so points never exceed the
    maximum range. Raises if the pose is inside a rack or out of bounds.
    """
    px, py = pose.x, pose.y
    if not (0 < px < layout.width and 0 < py < layout.height):
        raise ValueError(f"pose ({px:.2f}, {py:.2f}) outside the warehouse")
    for r in layout.racks:
        if r.contains(px, py):
            raise ValueError(f"pose ({px:.2f}, {py:.2f}) inside a rack")

    ang = 2.0 * math.pi * np.arange(beams) / beams
    world = pose.theta + ang
    d = np.column_stack([np.cos(world), np.sin(world)])

    with np.errstate(divide="ignore", invalid="ignore"):
        # boundary: exit distance of the bounding box slab
        tx = np.where(d[:, 0] > 0, (layout.width - px) / d[:, 0],
                      np.where(d[:, 0] < 0, -px / d[:, 0], np.inf))
        ty = np.where(d[:, 1] > 0, (layout.height - py) / d[:, 1],
                      np.where(d[:, 1] < 0, -py / d[:, 1], np.inf))
        best = np.minimum(tx, ty)

        rects = layout._rects
        if len(rects):
            # huge finite value instead of inf so 0 * inv never produces NaN
            inv = np.where(np.abs(d) > 1e-15, 1.0 / np.where(np.abs(d) > 1e-15, d, 1.0), 1e30)
            t1 = (rects[None, :, 0] - px) * inv[:, 0:1]
            t2 = (rects[None, :, 2] - px) * inv[:, 0:1]
            u1 = (rects[None, :, 1] - py) * inv[:, 1:2]
            u2 = (rects[None, :, 3] - py) * inv[:, 1:2]
            t_enter = np.maximum(np.minimum(t1, t2), np.minimum(u1, u2))
            t_exit = np.minimum(np.maximum(t1, t2), np.maximum(u1, u2))
            hit = (t_enter <= t_exit) & (t_enter > 1e-9)
            t_enter = np.where(hit, t_enter, np.inf)
            best = np.minimum(best, t_enter.min(axis=1))

    mask = best <= max_range
    ranges = best[mask]
    if range_sigma > 0:
        if rng is None:
            rng = np.random.default_rng(0)
        ranges = ranges + rng.normal(0.0, range_sigma, size=ranges.shape)
        ranges = np.clip(ranges, 1e-6, max_range)
    pts = np.column_stack([np.cos(ang[mask]), np.sin(ang[mask])]) * ranges[:, None]
    return Scan(pts, np.nonzero(mask)[0], beams, max_range)
