"""Loop-closure and Manhattan constraints from same-instance proposals.

Loop closures: for each proposed meta-node pair, a handful of pose pairs are
sampled at matching arc-length fractions of the two segments (indexed from
the far end when the match is reversed), aligned by point-to-point ICP on
their scans, and kept only when ICP converged with a residual below the
filter threshold. Manhattan relations: relative poses measured in the
rectified Manhattan frame, with the relative heading pinned to exactly 0 or
pi according to the reversal flag.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .manhattan import ManhattanGraph, rectified_node_pose
from .pose_graph import (
    ConstraintKind,
    LOOP_INFO_DIAG,
    MANHATTAN_INFO_DIAG,
    PGEdge,
    Pose2D,
    PoseGraph,
    between,
    info_diag,
    wrap_angle,
)
from .similarity import ProposalPair


@dataclass
class IcpResult:
    transform: Pose2D
    residual: float  # mean squared correspondence distance, m^2
    iterations: int
    converged: bool
    degenerate: bool = False
    objective: list[float] = field(default_factory=list)


@dataclass
class LoopCandidate:
    pg_i: int
    pg_j: int
    measurement: Pose2D
    residual: float
    source_proposal: int


def _points(scan_or_points) -> np.ndarray:
    pts = getattr(scan_or_points, "points", scan_or_points)
    return np.asarray(pts, dtype=float).reshape(-1, 2)


def _transform_points(pts: np.ndarray, pose: tuple[float, float, float]) -> np.ndarray:
    x, y, th = pose
    c, s = math.cos(th), math.sin(th)
    rot = np.array([[c, -s], [s, c]])
    return pts @ rot.T + np.array([x, y])


def _best_rigid(src: np.ndarray, dst: np.ndarray) -> tuple[float, float, float]:
    """Closed-form SE(2) minimizing sum ||R src + t - dst||^2."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    ds, dd = src - mu_s, dst - mu_d
    sxx = float(np.dot(ds[:, 0], dd[:, 0]) + np.dot(ds[:, 1], dd[:, 1]))
    sxy = float(np.dot(ds[:, 0], dd[:, 1]) - np.dot(ds[:, 1], dd[:, 0]))
    th = math.atan2(sxy, sxx)
    c, s = math.cos(th), math.sin(th)
    tx = mu_d[0] - (c * mu_s[0] - s * mu_s[1])
    ty = mu_d[1] - (s * mu_s[0] + c * mu_s[1])
    return tx, ty, th


def _collinear(pts: np.ndarray) -> bool:
    sv = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
    return bool(sv[-1] < 1e-9)


def icp(
    reference,
    moving,
    initial: Pose2D = Pose2D(),
    max_iterations: int = 50,
    tol: float = 1e-6,
) -> IcpResult:
    """Point-to-point ICP aligning ``moving`` onto ``reference``.

    Returns the transform mapping moving-frame points into the reference
    frame, i.e. the relative pose of the moving sensor in the reference
    sensor's frame. Correspondences are nearest neighbours; the alignment
    step is the closed-form centroid/cross-covariance solution, so the mean
    squared correspondence distance is non-increasing per iteration.
    Degenerate (collinear) geometry is flagged, not raised.
    """
    ref = _points(reference)
    mov = _points(moving)
    if len(ref) < 10 or len(mov) < 10:
        raise ValueError("both scans need at least 10 points")
    if _collinear(ref) or _collinear(mov):
        return IcpResult(initial, float("inf"), 0, False, degenerate=True)

    tree = cKDTree(ref)
    cur = (initial.x, initial.y, initial.theta)
    objective: list[float] = []
    converged = False
    it = 0
    for it in range(1, max_iterations + 1):
        moved = _transform_points(mov, cur)
        dist, idx = tree.query(moved)
        objective.append(float(np.mean(dist**2)))
        new = _best_rigid(mov, ref[idx])
        delta = max(
            abs(new[0] - cur[0]),
            abs(new[1] - cur[1]),
            abs(math.atan2(math.sin(new[2] - cur[2]), math.cos(new[2] - cur[2]))),
        )
        cur = new
        if delta < tol:
            converged = True
            break
    moved = _transform_points(mov, cur)
    dist, _ = tree.query(moved)
    residual = float(np.mean(dist**2))
    objective.append(residual)
    return IcpResult(Pose2D(*cur), residual, it, converged, objective=objective)


def _node_at_fraction(meta, frac: float) -> int:
    target = frac * meta.length
    return meta.pg_start + int(np.argmin(np.abs(meta.offsets - target)))


def sample_loop_pairs(
    proposal: ProposalPair, mg: ManhattanGraph, k: int
) -> list[tuple[int, int, Pose2D]]:
    """k node pairs at equal arc-length fractions of the two segments.

    A reversed proposal indexes the second segment from its far end and seeds
    ICP with a half-turn initial guess. Segments shorter than k nodes yield
    fewer (deduplicated) pairs.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    ma = mg.meta_nodes[proposal.meta_i]
    mb = mg.meta_nodes[proposal.meta_j]
    k_eff = min(k, ma.n_nodes, mb.n_nodes)
    guess = Pose2D(0.0, 0.0, math.pi) if proposal.reversed else Pose2D()
    out: list[tuple[int, int, Pose2D]] = []
    seen = set()
    for s in range(1, k_eff + 1):
        f = s / (k_eff + 1)
        i = _node_at_fraction(ma, f)
        j = _node_at_fraction(mb, 1.0 - f if proposal.reversed else f)
        if (i, j) not in seen:
            seen.add((i, j))
            out.append((i, j, guess))
    return out


def build_loop_constraints(
    proposals: list[ProposalPair],
    pg: PoseGraph,
    scans,
    mg: ManhattanGraph,
    k: int = 5,
    rho: float = 0.002,
    max_iterations: int = 50,
) -> tuple[list[PGEdge], list[LoopCandidate]]:
    """ICP-verified loop-closure edges plus the rejected candidates.

    An edge survives only if ICP converged, the geometry was not degenerate,
    and the mean squared residual is at most ``rho``.
    """
    info = info_diag(LOOP_INFO_DIAG)
    edges: list[PGEdge] = []
    rejected: list[LoopCandidate] = []
    for pidx, prop in enumerate(proposals):
        for i, j, guess in sample_loop_pairs(prop, mg, k):
            if len(_points(scans[i])) < 10 or len(_points(scans[j])) < 10:
                rejected.append(LoopCandidate(i, j, guess, float("inf"), pidx))
                continue
            res = icp(scans[i], scans[j], guess, max_iterations=max_iterations)
            if res.converged and not res.degenerate and res.residual <= rho:
                edges.append(
                    PGEdge(i, j, res.transform, info, ConstraintKind.LOOP_CLOSURE, robust=True)
                )
            else:
                rejected.append(LoopCandidate(i, j, res.transform, res.residual, pidx))
    return edges, rejected


def build_manhattan_constraints(
    proposals: list[ProposalPair],
    mg: ManhattanGraph,
    pg: PoseGraph,
    neighborhood: int = 3,
) -> list[PGEdge]:
    """Relative-pose edges measured in the rectified Manhattan frame.

    For each proposal, ``neighborhood`` node pairs nearest the matched
    arc-length fractions are constrained; the relative heading is set to
    exactly 0 (same direction) or pi (opposing revisit).
    """
    if neighborhood < 0:
        raise ValueError("neighborhood must be >= 0")
    if neighborhood == 0:
        return []
    info = info_diag(MANHATTAN_INFO_DIAG)
    out: list[PGEdge] = []
    for prop in proposals:
        ma = mg.meta_nodes[prop.meta_i]
        mb = mg.meta_nodes[prop.meta_j]
        dtheta = math.pi if prop.reversed else 0.0
        for i, j, _ in sample_loop_pairs(prop, mg, neighborhood):
            rp_i = rectified_node_pose(ma, i)
            rp_j = rectified_node_pose(mb, j)
            rel = between(rp_i, rp_j)
            meas = Pose2D(rel.x, rel.y, dtheta)
            out.append(PGEdge(i, j, meas, info, ConstraintKind.MANHATTAN, robust=True))
    return out


def build_adjacent_manhattan_constraints(
    mg: ManhattanGraph, pg: PoseGraph, neighborhood: int = 3,
    max_bin_residual: float = 0.45,
) -> list[PGEdge]:
    """Immediate Manhattan relations between consecutive meta-nodes.

    Adjacent rackspaces/corridors meet via an intersection at an angle
    snapped to the quarter grid; constraining node pairs across every such
    junction pins the whole skeleton rectilinear, independent of any
    same-instance proposals. The relative heading is the exact binned turn.

    Junctions whose raw integrated angle sits further than
    ``max_bin_residual`` from the grid are skipped: pinning an ambiguous
    turn could lock the solve into a wrong but self-consistent skeleton,
    whereas a skipped junction is recovered on the next feedback cycle once
    the drift around it has been corrected.
    """
    if neighborhood < 0:
        raise ValueError("neighborhood must be >= 0")
    if neighborhood == 0:
        return []
    info = info_diag(MANHATTAN_INFO_DIAG)
    out: list[PGEdge] = []

    def mean_heading(m) -> float:
        th = pg.poses[m.pg_start : m.pg_end + 1, 2]
        return math.atan2(float(np.sin(th).sum()), float(np.cos(th).sum()))

    for a, b in zip(mg.meta_nodes[:-1], mg.meta_nodes[1:]):
        nb = min(neighborhood, a.n_nodes, b.n_nodes)
        dq = ((b.quarter - a.quarter + 1) % 4) - 1
        dtheta = dq * (math.pi / 2.0)
        raw = wrap_angle(mean_heading(b) - mean_heading(a))
        if abs(wrap_angle(raw - dtheta)) > max_bin_residual:
            continue
        for s in range(1, nb + 1):
            f = s / (nb + 1)
            i = a.pg_start + int(np.argmin(np.abs(a.offsets - f * a.length)))
            j = b.pg_start + int(np.argmin(np.abs(b.offsets - f * b.length)))
            rel = between(rectified_node_pose(a, i), rectified_node_pose(b, j))
            meas = Pose2D(rel.x, rel.y, dtheta)
            out.append(PGEdge(i, j, meas, info, ConstraintKind.MANHATTAN, robust=True))
    return out


def rejected_csv(rejected: list[LoopCandidate]) -> str:
    lines = ["pg_i,pg_j,residual"]
    for c in rejected:
        lines.append(f"{c.pg_i},{c.pg_j},{c.residual:.8f}")
    return "\n".join(lines) + "\n"
