"""SE(2) poses, the pose-graph data model, and g2o-style text I/O.

Conventions used throughout the package:

* angles are radians, normalized to (-pi, pi]; pi is representable exactly
  so that opposing-viewpoint (180 degree) relations round-trip cleanly,
* an edge ``i -> j`` stores the measurement ``Z_ij = between(x_i, x_j)``,
  i.e. the pose of node j expressed in the frame of node i,
* node 0 is the gauge node and is held fixed during optimization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

import numpy as np

TWO_PI = 2.0 * math.pi

# Default information matrices (diagonal entries). Manhattan relations are
# confident in orientation (angles are snapped to the quarter grid) and weak
# in translation; odometry is trusted most since it anchors the whole chain.
ODOMETRY_INFO_DIAG = (50.0, 50.0, 100.0)
LOOP_INFO_DIAG = (20.0, 20.0, 50.0)
MANHATTAN_INFO_DIAG = (5.0, 5.0, 200.0)


class GraphParseError(ValueError):
    """Malformed pose-graph text; message carries the offending line number."""


def wrap_angle(theta: float) -> float:
    """Normalize an angle into (-pi, pi]."""
    return -((math.pi - theta) % TWO_PI - math.pi)


def wrap_angles(theta: np.ndarray) -> np.ndarray:
    """Vectorized :func:`wrap_angle`."""
    return -((math.pi - np.asarray(theta)) % TWO_PI - math.pi)


class TopoLabel(Enum):
    RACKSPACE = "RACKSPACE"
    CORRIDOR = "CORRIDOR"
    INTERSECTION = "INTERSECTION"


class ConstraintKind(Enum):
    ODOMETRY = "ODOM"
    LOOP_CLOSURE = "LOOP"
    MANHATTAN = "MANHATTAN"


@dataclass(frozen=True)
class Pose2D:
    """An SE(2) element (x, y, theta); theta auto-normalized to (-pi, pi]."""

    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    @staticmethod
    def from_array(v) -> "Pose2D":
        return Pose2D(float(v[0]), float(v[1]), float(v[2]))


def compose(a: Pose2D, b: Pose2D) -> Pose2D:
    """Return a (+) b: pose b expressed in a's frame, mapped to the world."""
    c, s = math.cos(a.theta), math.sin(a.theta)
    return Pose2D(
        a.x + c * b.x - s * b.y,
        a.y + s * b.x + c * b.y,
        a.theta + b.theta,
    )


def between(a: Pose2D, b: Pose2D) -> Pose2D:
    """Return a^-1 (+) b, the relative pose of b in a's frame."""
    c, s = math.cos(a.theta), math.sin(a.theta)
    dx, dy = b.x - a.x, b.y - a.y
    return Pose2D(c * dx + s * dy, -s * dx + c * dy, b.theta - a.theta)


def invert(a: Pose2D) -> Pose2D:
    c, s = math.cos(a.theta), math.sin(a.theta)
    return Pose2D(-(c * a.x + s * a.y), -(-s * a.x + c * a.y), -a.theta)


def info_diag(diag) -> np.ndarray:
    return np.diag(np.asarray(diag, dtype=float))


@dataclass
class PGEdge:
    """A relative-pose constraint between nodes i and j.

    ``information`` is the symmetric positive-definite 3x3 weight of the
    measurement (units 1/m^2, 1/m^2, 1/rad^2). ``robust`` marks the edge as
    eligible for robust down-weighting in the optimizer.
    """

    i: int
    j: int
    measurement: Pose2D
    information: np.ndarray
    kind: ConstraintKind
    robust: bool = True

    def __post_init__(self):
        self.information = np.asarray(self.information, dtype=float)

    def validate(self) -> None:
        if self.information.shape != (3, 3):
            raise ValueError(f"edge {self.i}->{self.j}: information must be 3x3")
        if not np.allclose(self.information, self.information.T, atol=1e-12):
            raise ValueError(f"edge {self.i}->{self.j}: information not symmetric")
        if np.linalg.eigvalsh(self.information).min() <= 0:
            raise ValueError(f"edge {self.i}->{self.j}: information not positive definite")
        if self.kind is ConstraintKind.ODOMETRY and self.j != self.i + 1:
            raise ValueError(f"odometry edge {self.i}->{self.j} must connect consecutive nodes")


def odometry_edge(i: int, measurement: Pose2D, information=None) -> PGEdge:
    info = info_diag(ODOMETRY_INFO_DIAG) if information is None else information
    return PGEdge(i, i + 1, measurement, info, ConstraintKind.ODOMETRY, robust=False)


@dataclass
class PoseGraph:
    """Nodes (pose estimates plus topological labels) and typed constraints.

    Node ids are implicit: row k of ``poses`` is node k. The graph is a value
    type; solvers return modified copies rather than mutating in place.
    """

    poses: np.ndarray
    labels: list[TopoLabel]
    edges: list[PGEdge] = field(default_factory=list)

    def __post_init__(self):
        self.poses = np.asarray(self.poses, dtype=float).reshape(-1, 3)
        if not self.labels:
            self.labels = [TopoLabel.CORRIDOR] * self.n_nodes

    @property
    def n_nodes(self) -> int:
        return self.poses.shape[0]

    def node_pose(self, i: int) -> Pose2D:
        return Pose2D.from_array(self.poses[i])

    def copy(self) -> "PoseGraph":
        return PoseGraph(self.poses.copy(), list(self.labels), list(self.edges))

    def validate(self) -> None:
        n = self.n_nodes
        if len(self.labels) != n:
            raise ValueError(f"{len(self.labels)} labels for {n} nodes")
        for e in self.edges:
            e.validate()
            if not (0 <= e.i < n and 0 <= e.j < n):
                raise ValueError(f"edge {e.i}->{e.j} references a missing node (n={n})")


# ---------------------------------------------------------------------------
# text format
#
#   VERTEX_SE2 <id> <x> <y> <theta>
#   VERTEX_LABEL <id> <RACKSPACE|CORRIDOR|INTERSECTION>
#   EDGE_SE2 <i> <j> <dx> <dy> <dtheta> <I11> <I12> <I13> <I22> <I23> <I33> [KIND=...]
#
# '#' starts a comment. Floats are written with repr() so the round trip is
# exact. The KIND token is dropped in plain-g2o export mode.
# ---------------------------------------------------------------------------

_KIND_BY_TOKEN = {k.value: k for k in ConstraintKind}


def save_graph(g: PoseGraph, include_kind: bool = True, include_labels: bool = True) -> str:
    lines = []
    for i in range(g.n_nodes):
        x, y, t = g.poses[i]
        lines.append(f"VERTEX_SE2 {i} {x!r} {y!r} {t!r}")
    if include_labels:
        for i, lab in enumerate(g.labels):
            lines.append(f"VERTEX_LABEL {i} {lab.value}")
    for e in g.edges:
        m = e.measurement
        info = e.information
        upper = (info[0, 0], info[0, 1], info[0, 2], info[1, 1], info[1, 2], info[2, 2])
        parts = [f"EDGE_SE2 {e.i} {e.j} {m.x!r} {m.y!r} {m.theta!r}"]
        parts.append(" ".join(repr(float(v)) for v in upper))
        if include_kind:
            parts.append(f"KIND={e.kind.value}")
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def _parse_float(tok: str, lineno: int) -> float:
    try:
        return float(tok)
    except ValueError:
        raise GraphParseError(f"line {lineno}: expected a number, got {tok!r}") from None


def _parse_int(tok: str, lineno: int) -> int:
    try:
        return int(tok)
    except ValueError:
        raise GraphParseError(f"line {lineno}: expected an integer, got {tok!r}") from None


def load_graph(lines: Iterable[str]) -> PoseGraph:
    """Parse the text format; raises :class:`GraphParseError` with a line number."""
    if isinstance(lines, str):
        lines = lines.splitlines()
    vertices: dict[int, tuple[float, float, float]] = {}
    labels: dict[int, TopoLabel] = {}
    raw_edges: list[tuple[int, int, int, Pose2D, np.ndarray, ConstraintKind | None]] = []

    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        tag = tok[0]
        if tag == "VERTEX_SE2":
            if len(tok) != 5:
                raise GraphParseError(f"line {lineno}: VERTEX_SE2 needs 4 fields")
            vid = _parse_int(tok[1], lineno)
            if vid in vertices:
                raise GraphParseError(f"line {lineno}: duplicate vertex id {vid}")
            vertices[vid] = tuple(_parse_float(t, lineno) for t in tok[2:5])
        elif tag == "VERTEX_LABEL":
            if len(tok) != 3:
                raise GraphParseError(f"line {lineno}: VERTEX_LABEL needs 2 fields")
            vid = _parse_int(tok[1], lineno)
            try:
                labels[vid] = TopoLabel(tok[2])
            except ValueError:
                raise GraphParseError(f"line {lineno}: unknown label {tok[2]!r}") from None
        elif tag == "EDGE_SE2":
            if len(tok) not in (12, 13):
                raise GraphParseError(f"line {lineno}: EDGE_SE2 needs 11 fields plus optional KIND")
            i = _parse_int(tok[1], lineno)
            j = _parse_int(tok[2], lineno)
            vals = [_parse_float(t, lineno) for t in tok[3:12]]
            meas = Pose2D(vals[0], vals[1], vals[2])
            i11, i12, i13, i22, i23, i33 = vals[3:9]
            info = np.array([[i11, i12, i13], [i12, i22, i23], [i13, i23, i33]])
            kind = None
            if len(tok) == 13:
                if not tok[12].startswith("KIND="):
                    raise GraphParseError(f"line {lineno}: trailing token must be KIND=...")
                key = tok[12][5:]
                if key not in _KIND_BY_TOKEN:
                    raise GraphParseError(f"line {lineno}: unknown edge kind {key!r}")
                kind = _KIND_BY_TOKEN[key]
            raw_edges.append((lineno, i, j, meas, info, kind))
        else:
            raise GraphParseError(f"line {lineno}: unknown record type {tag!r}")

    n = len(vertices)
    if sorted(vertices) != list(range(n)):
        raise GraphParseError("vertex ids must be contiguous starting at 0")
    for vid in labels:
        if vid not in vertices:
            raise GraphParseError(f"label references unknown vertex {vid}")

    poses = np.array([vertices[i] for i in range(n)]).reshape(-1, 3)
    label_list = [labels.get(i, TopoLabel.CORRIDOR) for i in range(n)]
    edges = []
    for lineno, i, j, meas, info, kind in raw_edges:
        if not (0 <= i < n and 0 <= j < n):
            raise GraphParseError(f"line {lineno}: edge {i}->{j} references a missing vertex")
        if kind is None:
            kind = ConstraintKind.ODOMETRY if j == i + 1 else ConstraintKind.LOOP_CLOSURE
        robust = kind is not ConstraintKind.ODOMETRY
        edges.append(PGEdge(i, j, meas, info, kind, robust=robust))

    g = PoseGraph(poses, label_list, edges)
    g.validate()
    return g


def save_graph_file(g: PoseGraph, path, include_kind: bool = True, include_labels: bool = True) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(save_graph(g, include_kind=include_kind, include_labels=include_labels))


def load_graph_file(path) -> PoseGraph:
    with open(path, "r", encoding="utf-8") as fh:
        return load_graph(fh)
