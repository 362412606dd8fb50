"""Siamese MLP deciding whether two meta-nodes are the same place.

A small two-hidden-layer network (4 -> 64 -> 32 -> 16, tanh hidden units,
linear output) embeds the scaled endpoint tuple of a meta-node; the Euclidean
distance between two embeddings is trained with a contrastive loss so that
same-instance segments, including ones traversed in the opposite direction,
land within tau_high of each other. Training data is synthesized on the fly
from the known general structure of the warehouse. Everything is plain numpy
with hand-written backpropagation through both shared branches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .manhattan import ManhattanGraph, MetaNode
from .pose_graph import TopoLabel

LAYER_SIZES = (4, 64, 32, 16)


class ConfidenceBand(Enum):
    HIGH = "high"
    LOW = "low"


@dataclass
class ProposalPair:
    """Candidate same-instance pair of meta-nodes (meta_i < meta_j)."""

    meta_i: int
    meta_j: int
    distance: float
    band: ConfidenceBand
    reversed: bool

    @property
    def key(self) -> tuple[int, int, bool]:
        return (self.meta_i, self.meta_j, self.reversed)


@dataclass
class SiameseModel:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    margin: float = 1.0
    tau_high: float = 0.5
    tau_low: float = 0.6

    def params(self) -> list[np.ndarray]:
        return self.weights + self.biases

    def copy(self) -> "SiameseModel":
        return SiameseModel(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.margin,
            self.tau_high,
            self.tau_low,
        )


def init_model(seed: int = 0, sizes=LAYER_SIZES, margin: float = 1.0,
               tau_high: float = 0.5, tau_low: float = 0.6) -> SiameseModel:
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        scale = math.sqrt(2.0 / (fan_in + fan_out))
        ws.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    if tau_high > tau_low:
        raise ValueError("tau_high must be <= tau_low")
    return SiameseModel(ws, bs, margin, tau_high, tau_low)


def meta_feature(meta: MetaNode, scale: float) -> np.ndarray:
    """Endpoint tuple of a meta-node scaled by the warehouse extent."""
    return np.array([meta.x_start, meta.y_start, meta.x_end, meta.y_end]) / scale


def swap_endpoints(f: np.ndarray) -> np.ndarray:
    return np.concatenate([f[..., 2:4], f[..., 0:2]], axis=-1)


def _forward(model: SiameseModel, x: np.ndarray):
    acts = [x]
    h = x
    n_layers = len(model.weights)
    for li, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w + b
        if li < n_layers - 1:
            h = np.tanh(h)
        acts.append(h)
    return h, acts


def embed(model: SiameseModel, feature: np.ndarray) -> np.ndarray:
    """Deterministic forward pass; both branch inputs share these weights."""
    out, _ = _forward(model, np.atleast_2d(np.asarray(feature, dtype=float)))
    return out[0] if np.asarray(feature).ndim == 1 else out


def pair_distance(model: SiameseModel, f1: np.ndarray, f2: np.ndarray) -> float:
    return float(np.linalg.norm(embed(model, f1) - embed(model, f2)))


def pair_distances(model: SiameseModel, f1: np.ndarray, f2: np.ndarray) -> np.ndarray:
    return np.linalg.norm(embed(model, f1) - embed(model, f2), axis=-1)


def contrastive_loss(d: float, same: bool, margin: float = 1.0) -> float:
    """d^2/2 for same pairs, max(0, margin - d)^2/2 for different pairs."""
    if d < 0:
        raise ValueError("distance must be non-negative")
    if same:
        return 0.5 * d * d
    gap = max(0.0, margin - d)
    return 0.5 * gap * gap


def _branch_backward(model: SiameseModel, acts, g_out: np.ndarray, grads_w, grads_b):
    g = g_out
    n_layers = len(model.weights)
    for li in range(n_layers - 1, -1, -1):
        a_in = acts[li]
        grads_w[li] += a_in.T @ g
        grads_b[li] += g.sum(axis=0)
        if li > 0:
            g = (g @ model.weights[li].T) * (1.0 - acts[li] ** 2)


def loss_and_grads(model: SiameseModel, f1: np.ndarray, f2: np.ndarray, same: np.ndarray):
    """Mean contrastive loss over pairs and its analytic parameter gradients.

    Both branches share the weights, so the gradients from the two forward
    passes accumulate into the same arrays.
    """
    f1 = np.atleast_2d(np.asarray(f1, dtype=float))
    f2 = np.atleast_2d(np.asarray(f2, dtype=float))
    same = np.asarray(same, dtype=bool)
    n = f1.shape[0]
    e1, acts1 = _forward(model, f1)
    e2, acts2 = _forward(model, f2)
    diff = e1 - e2
    d = np.linalg.norm(diff, axis=1)

    m = model.margin
    gap = np.maximum(0.0, m - d)
    loss = float(np.mean(np.where(same, 0.5 * d**2, 0.5 * gap**2)))

    # dL/d(e1) per pair; same: diff, different (inside margin): -(m-d)/d * diff
    safe_d = np.where(d > 1e-12, d, 1.0)
    coef = np.where(same, 1.0, np.where((d < m) & (d > 1e-12), -gap / safe_d, 0.0))
    g1 = (coef[:, None] * diff) / n
    grads_w = [np.zeros_like(w) for w in model.weights]
    grads_b = [np.zeros_like(b) for b in model.biases]
    _branch_backward(model, acts1, g1, grads_w, grads_b)
    _branch_backward(model, acts2, -g1, grads_w, grads_b)
    return loss, grads_w, grads_b


def train(model: SiameseModel, pairs, epochs: int = 200, learning_rate: float = 0.5):
    """Full-batch gradient descent on the mean contrastive loss.

    Returns the trained model and the per-epoch loss curve. Deterministic for
    fixed inputs; raises if the loss goes non-finite (learning rate too big).
    """
    f1, f2, same = pairs
    f1 = np.atleast_2d(np.asarray(f1, dtype=float))
    f2 = np.atleast_2d(np.asarray(f2, dtype=float))
    same = np.asarray(same, dtype=bool)
    model = model.copy()
    losses = np.zeros(epochs)
    for ep in range(epochs):
        loss, gw, gb = loss_and_grads(model, f1, f2, same)
        if not math.isfinite(loss):
            raise ValueError("training diverged (non-finite loss); reduce the learning rate")
        losses[ep] = loss
        for w, g in zip(model.weights, gw):
            w -= learning_rate * g
        for b, g in zip(model.biases, gb):
            b -= learning_rate * g
    return model, losses


@dataclass
class SynthSpec:
    """Ranges describing the warehouse structure for on-the-fly training data."""

    length_range: tuple[float, float] = (3.0, 46.0)
    spacing_range: tuple[float, float] = (4.2, 11.2)
    extent: float = 50.0
    noise_frac: float = 0.02
    swap_prob: float = 0.5


def synthesize_training_pairs(spec: SynthSpec, n_pairs: int, seed: int = 0):
    """Balanced synthetic same/different feature pairs (exactly half positive).

    Positives are the same axis-aligned segment observed twice with additive
    coordinate noise (sigma = noise_frac of the length) and a 50% chance of
    endpoint swap (reversed traversal). Negatives mix laterally offset
    copies — adjacent aisles, the hard case — with unrelated segments.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    rng = np.random.default_rng(seed)
    n_pos = n_pairs // 2
    n_neg = n_pairs - n_pos

    def random_segment(count):
        q = rng.integers(0, 4, size=count)
        ang = q * (math.pi / 2)
        length = rng.uniform(*spec.length_range, size=count)
        sx = rng.uniform(0.0, spec.extent, size=count)
        sy = rng.uniform(0.0, spec.extent, size=count)
        ex = sx + length * np.cos(ang)
        ey = sy + length * np.sin(ang)
        return np.column_stack([sx, sy, ex, ey]), length

    def jitter(f, length):
        sig = (spec.noise_frac * length)[:, None]
        return f + rng.normal(0.0, 1.0, size=f.shape) * sig

    base_p, len_p = random_segment(n_pos)
    a_pos = jitter(base_p, len_p)
    b_pos = jitter(base_p, len_p)
    swap = rng.random(n_pos) < spec.swap_prob
    b_pos[swap] = swap_endpoints(b_pos[swap])

    base_n, len_n = random_segment(n_neg)
    a_neg = jitter(base_n, len_n)
    hard = rng.random(n_neg) < 0.5
    offs = rng.uniform(*spec.spacing_range, size=n_neg) * rng.choice([-1.0, 1.0], size=n_neg)
    horiz = np.isclose(base_n[:, 1], base_n[:, 3])
    b_neg = base_n.copy()
    b_neg[horiz] += np.column_stack([np.zeros(horiz.sum()), offs[horiz], np.zeros(horiz.sum()), offs[horiz]])
    b_neg[~horiz] += np.column_stack([offs[~horiz], np.zeros((~horiz).sum()), offs[~horiz], np.zeros((~horiz).sum())])
    rand_b, _ = random_segment(n_neg)
    b_neg = np.where(hard[:, None], b_neg, rand_b)
    b_neg = jitter(b_neg, len_n)
    swap_n = rng.random(n_neg) < spec.swap_prob
    b_neg[swap_n] = swap_endpoints(b_neg[swap_n])

    f1 = np.vstack([a_pos, a_neg]) / spec.extent
    f2 = np.vstack([b_pos, b_neg]) / spec.extent
    same = np.concatenate([np.ones(n_pos, dtype=bool), np.zeros(n_neg, dtype=bool)])
    order = rng.permutation(n_pairs)
    return f1[order], f2[order], same[order]


def pair_accuracy(model: SiameseModel, pairs, threshold: float | None = None) -> float:
    """Fraction of pairs classified correctly at the given distance threshold."""
    f1, f2, same = pairs
    thr = model.tau_high if threshold is None else threshold
    d = pair_distances(model, f1, f2)
    return float(np.mean((d <= thr) == same))


def propose(model: SiameseModel, mg: ManhattanGraph, scale: float,
            min_length: float = 0.5) -> list[ProposalPair]:
    """Same-instance candidates among same-label meta-node pairs.

    Every unordered pair with equal labels is evaluated in both orientations
    (as-is and with the second segment's endpoints swapped); the smaller
    distance wins and sets the reversal flag. Pairs within tau_low are kept
    and banded by tau_high. Segments shorter than ``min_length`` carry no
    place identity and are skipped.
    """
    metas = mg.meta_nodes
    feats = np.array([meta_feature(m, scale) for m in metas]).reshape(len(metas), 4)
    if len(metas) < 2:
        return []
    emb = embed(model, feats)
    emb_swap = embed(model, swap_endpoints(feats))
    out: list[ProposalPair] = []
    for i in range(len(metas)):
        for j in range(i + 1, len(metas)):
            if metas[i].label is not metas[j].label:
                continue
            if metas[i].length < min_length or metas[j].length < min_length:
                continue
            d_fwd = float(np.linalg.norm(emb[i] - emb[j]))
            d_rev = float(np.linalg.norm(emb[i] - emb_swap[j]))
            d = min(d_fwd, d_rev)
            if d > model.tau_low:
                continue
            # the chain headings decide the relative orientation: same-place
            # segments are parallel or antiparallel. For short near-symmetric
            # segments the embedding argmin is a coin flip, and a wrong flag
            # would pin a half-turn error into the constraints. Perpendicular
            # headings mean the chain is locally corrupted: never trust such
            # a pair with more than low confidence.
            dq = (metas[j].quarter - metas[i].quarter) % 4
            if dq == 0:
                rev = False
            elif dq == 2:
                rev = True
            else:
                rev = d_rev < d_fwd
            band = ConfidenceBand.HIGH if d <= model.tau_high and dq % 2 == 0 else ConfidenceBand.LOW
            out.append(ProposalPair(i, j, d, band, rev))
    return out


def propose_nearest_endpoint(mg: ManhattanGraph, scale: float, tol: float = 0.05) -> list[ProposalPair]:
    """Geometric nearest-neighbour baseline over the same feature space.

    Pairs whose scaled endpoint tuples match within ``tol`` (under either
    orientation) are proposed; used for differential testing of the learned
    comparator.
    """
    metas = mg.meta_nodes
    feats = np.array([meta_feature(m, scale) for m in metas]).reshape(len(metas), 4)
    out: list[ProposalPair] = []
    for i in range(len(metas)):
        for j in range(i + 1, len(metas)):
            if metas[i].label is not metas[j].label:
                continue
            d_fwd = float(np.linalg.norm(feats[i] - feats[j]))
            d_rev = float(np.linalg.norm(feats[i] - swap_endpoints(feats[j])))
            d, rev = (d_rev, True) if d_rev < d_fwd else (d_fwd, False)
            if d <= tol:
                out.append(ProposalPair(i, j, d, ConfidenceBand.HIGH, rev))
    return out


def save_model(model: SiameseModel, path) -> None:
    """Flat text checkpoint: layer dims header, then row-major weights."""
    sizes = [model.weights[0].shape[0]] + [w.shape[1] for w in model.weights]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(" ".join(str(s) for s in sizes) + "\n")
        fh.write(f"margin {model.margin!r}\n")
        fh.write(f"tau_high {model.tau_high!r}\n")
        fh.write(f"tau_low {model.tau_low!r}\n")
        for w, b in zip(model.weights, model.biases):
            fh.write(" ".join(repr(v) for v in w.ravel()) + "\n")
            fh.write(" ".join(repr(v) for v in b.ravel()) + "\n")


def load_model(path) -> SiameseModel:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    sizes = [int(t) for t in lines[0].split()]
    margin = float(lines[1].split()[1])
    tau_high = float(lines[2].split()[1])
    tau_low = float(lines[3].split()[1])
    ws, bs = [], []
    row = 4
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        ws.append(np.array([float(t) for t in lines[row].split()]).reshape(fan_in, fan_out))
        bs.append(np.array([float(t) for t in lines[row + 1].split()]))
        row += 2
    return SiameseModel(ws, bs, margin, tau_high, tau_low)
