"""Absolute trajectory error with closed-form rigid SE(2) alignment."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .pose_graph import Pose2D, PoseGraph, wrap_angles


@dataclass
class AteResult:
    rmse: float
    errors: np.ndarray  # per-node translational error, meters
    alignment: Pose2D
    rot_rmse: float | None = None  # supplementary, radians


def align(estimate: np.ndarray, truth: np.ndarray) -> Pose2D:
    """Least-squares rigid transform T minimizing sum ||T(est_i) - truth_i||^2.

    Rotation comes from the cross-covariance angle, translation from the
    centroids. Inputs are (n, 2) arrays with matching row order.
    """
    est = np.asarray(estimate, dtype=float).reshape(-1, 2)
    ref = np.asarray(truth, dtype=float).reshape(-1, 2)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape[0]} vs {ref.shape[0]}")
    if est.shape[0] < 2:
        raise ValueError("need at least two points to align")
    if np.allclose(est, est[0], atol=1e-12):
        raise ValueError("degenerate input: all estimate points coincide")

    mu_e = est.mean(axis=0)
    mu_r = ref.mean(axis=0)
    de = est - mu_e
    dr = ref - mu_r
    sxx = float(np.dot(de[:, 0], dr[:, 0]) + np.dot(de[:, 1], dr[:, 1]))
    sxy = float(np.dot(de[:, 0], dr[:, 1]) - np.dot(de[:, 1], dr[:, 0]))
    theta = math.atan2(sxy, sxx)
    c, s = math.cos(theta), math.sin(theta)
    tx = mu_r[0] - (c * mu_e[0] - s * mu_e[1])
    ty = mu_r[1] - (s * mu_e[0] + c * mu_e[1])
    return Pose2D(tx, ty, theta)


def apply_alignment(t: Pose2D, xy: np.ndarray) -> np.ndarray:
    c, s = math.cos(t.theta), math.sin(t.theta)
    rot = np.array([[c, -s], [s, c]])
    return xy @ rot.T + np.array([t.x, t.y])


def ate(estimate, truth) -> AteResult:
    """RMSE of translational error after optimal rigid alignment.

    ``estimate`` is a PoseGraph or an (n, 2|3) array; ``truth`` is an
    (n, 2|3) array. When both carry headings a supplementary rotational RMSE
    is reported as well.
    """
    est = getattr(estimate, "poses", estimate)
    ref = getattr(truth, "poses", truth)
    est = np.asarray(est, dtype=float)
    ref = np.asarray(ref, dtype=float)
    est = est.reshape(est.shape[0], -1)
    ref = ref.reshape(ref.shape[0], -1)
    if est.shape[0] != ref.shape[0]:
        raise ValueError(f"length mismatch: {est.shape[0]} vs {ref.shape[0]}")

    t = align(est[:, :2], ref[:, :2])
    aligned = apply_alignment(t, est[:, :2])
    errors = np.linalg.norm(aligned - ref[:, :2], axis=1)
    rmse = float(np.sqrt(np.mean(errors**2)))

    rot_rmse = None
    if est.shape[1] >= 3 and ref.shape[1] >= 3:
        dth = wrap_angles(est[:, 2] + t.theta - ref[:, 2])
        rot_rmse = float(np.sqrt(np.mean(dth**2)))
    return AteResult(rmse, errors, t, rot_rmse)
