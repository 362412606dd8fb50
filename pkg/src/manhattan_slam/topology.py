"""Grouping of per-node topological labels into contiguous regions."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

from .pose_graph import TopoLabel


@dataclass(frozen=True)
class TopoRegion:
    label: TopoLabel
    pg_start: int
    pg_end: int  # inclusive

    @property
    def n_nodes(self) -> int:
        return self.pg_end - self.pg_start + 1


@dataclass
class TopologicalGraph:
    """Ordered regions from a single traversal; adjacency is the path k -> k+1."""

    regions: list[TopoRegion]

    @property
    def edges(self) -> list[tuple[int, int]]:
        return [(k, k + 1) for k in range(len(self.regions) - 1)]

    def labels_per_node(self) -> list[TopoLabel]:
        out: list[TopoLabel] = []
        for r in self.regions:
            out.extend([r.label] * r.n_nodes)
        return out


def smooth_labels(labels: list[TopoLabel], window: int = 5) -> list[TopoLabel]:
    """Majority-vote each label over a centered window (ties keep the original).

    ``window`` must be odd; 1 disables smoothing. At the ends the window is
    clipped to the valid range.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be odd and >= 1")
    if window == 1:
        return list(labels)
    n = len(labels)
    half = window // 2
    out = []
    for i in range(n):
        lo, hi = max(0, i - half), min(n, i + half + 1)
        counts = Counter(labels[lo:hi])
        best = counts.most_common()
        top = [lab for lab, c in best if c == best[0][1]]
        out.append(labels[i] if len(top) > 1 else top[0])
    return out


def group(labels: list[TopoLabel], min_run: int = 3) -> TopologicalGraph:
    """Group maximal runs of equal labels into regions.

    Runs shorter than ``min_run`` are merged into the preceding region (which
    keeps its label); the first run is exempt. Adjacent same-label regions
    produced by a merge are coalesced, so the output always alternates labels.
    """
    if not labels:
        raise ValueError("empty label sequence")
    runs: list[list] = []  # [label, start, end]
    for i, lab in enumerate(labels):
        if runs and runs[-1][0] == lab:
            runs[-1][2] = i
        else:
            runs.append([lab, i, i])

    regions: list[list] = []
    for lab, start, end in runs:
        if regions and end - start + 1 < min_run:
            regions[-1][2] = end  # absorbed; predecessor keeps its label
        elif regions and regions[-1][0] == lab:
            regions[-1][2] = end
        else:
            regions.append([lab, start, end])
    return TopologicalGraph([TopoRegion(lab, s, e) for lab, s, e in regions])
