"""Pair losses over mined similarity entries, with analytic gradients.

``soft_contrastive`` replaces the contrastive hinge with a scaled softplus:
positives pay log(1 + exp(pos_scale * (threshold - S))) / pos_scale, negatives
the mirrored term, each branch averaged over its per-anchor mined count and
the whole thing averaged over anchors that kept at least one pair. Gradients
are returned sparsely per mined (anchor, partner) entry, plus the derivative
w.r.t. the threshold, so a trainer can chain them through any embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mining import MinedPairs, SimilarityMatrix

COUNT_MODES = ("per_anchor", "global")


def softplus(x):
    """log(1 + e^x) without overflow for any float64 argument."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    """Logistic function, overflow-safe on both tails."""
    x = np.asarray(x, dtype=np.float64)
    t = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


@dataclass
class LossParams:
    """threshold/pos_scale/neg_scale drive the softplus loss; the margins
    belong to the hinge baseline. count_mode switches the softplus loss
    between per-anchor branch averaging (default) and flat averaging over
    all mined pairs."""

    threshold: float = 0.7
    pos_scale: float = 2.0
    neg_scale: float = 40.0
    pos_margin: float = 0.7
    neg_margin: float = 0.7
    count_mode: str = "per_anchor"

    def __post_init__(self):
        if self.pos_scale <= 0 or self.neg_scale <= 0:
            raise ValueError("pos_scale and neg_scale must be positive")
        if not np.isfinite(self.threshold):
            raise ValueError("threshold must be finite")
        if self.count_mode not in COUNT_MODES:
            raise ValueError(f"count_mode must be one of {COUNT_MODES}")


@dataclass
class LossOutput:
    """Scalar loss, sparse d(loss)/dS per mined (anchor, partner) key, and
    d(loss)/d(threshold)."""

    value: float
    grad_sim: dict[tuple[int, int], float] = field(default_factory=dict)
    grad_threshold: float = 0.0
    anchors_used: int = 0


def _active_anchors(pairs: MinedPairs) -> list[int]:
    return [i for i in range(len(pairs.pos_partners))
            if len(pairs.pos_partners[i]) or len(pairs.neg_partners[i])]


def soft_contrastive(sim: SimilarityMatrix, pairs: MinedPairs, params: LossParams) -> LossOutput:
    """Softplus contrastive loss over mined pairs.

    Per-anchor mode, for anchor a with mined branch sizes (p_a, q_a):

        L_a = sum_pos softplus(mu (t - S)) / (mu p_a)
            + sum_neg softplus(nu (S - t)) / (nu q_a)

    and L is the mean of L_a over anchors with at least one mined pair.
    An empty branch contributes zero. Global mode drops the anchor structure
    and averages each branch over its total mined count instead.
    A fully starved batch yields value 0 with empty gradients.
    """
    s = sim.values
    mu, nu, thr = params.pos_scale, params.neg_scale, params.threshold
    active = _active_anchors(pairs)
    n_anchors = len(active)
    if n_anchors == 0:
        return LossOutput(value=0.0, grad_sim={}, grad_threshold=0.0, anchors_used=0)

    grad_sim: dict[tuple[int, int], float] = {}
    grad_thr = 0.0
    value = 0.0

    if params.count_mode == "global":
        pos_div = mu * max(pairs.n_pos, 1)
        neg_div = nu * max(pairs.n_neg, 1)

    for a in active:
        pos = pairs.pos_partners[a]
        neg = pairs.neg_partners[a]
        if params.count_mode == "per_anchor":
            pos_div = mu * max(len(pos), 1)
            neg_div = nu * max(len(neg), 1)
        if len(pos):
            x = mu * (thr - s[a, pos])
            value += softplus(x).sum() / pos_div
            sig = sigmoid(x)
            scale = mu / pos_div
            for j, sg in zip(pos, sig):
                grad_sim[(a, int(j))] = -sg * scale
                grad_thr += sg * scale
        if len(neg):
            x = nu * (s[a, neg] - thr)
            value += softplus(x).sum() / neg_div
            sig = sigmoid(x)
            scale = nu / neg_div
            for k, sg in zip(neg, sig):
                grad_sim[(a, int(k))] = sg * scale
                grad_thr -= sg * scale

    if params.count_mode == "per_anchor":
        inv = 1.0 / n_anchors
        value *= inv
        grad_thr *= inv
        grad_sim = {key: g * inv for key, g in grad_sim.items()}

    return LossOutput(value=float(value), grad_sim=grad_sim,
                      grad_threshold=float(grad_thr), anchors_used=n_anchors)


def contrastive(sim: SimilarityMatrix, pairs: MinedPairs, params: LossParams) -> LossOutput:
    """Hinge baseline: mean over mined pairs of
    [S - neg_margin]_+ (negatives) and [pos_margin - S]_+ (positives).
    Subgradient at the hinge corner is 0."""
    s = sim.values
    total = pairs.n_pos + pairs.n_neg
    active = _active_anchors(pairs)
    if total == 0:
        return LossOutput(value=0.0, grad_sim={}, grad_threshold=0.0, anchors_used=0)

    inv = 1.0 / total
    value = 0.0
    grad_sim: dict[tuple[int, int], float] = {}
    for a in active:
        for j in pairs.pos_partners[a]:
            gap = params.pos_margin - s[a, j]
            if gap > 0:
                value += gap * inv
                grad_sim[(a, int(j))] = -inv
            else:
                grad_sim[(a, int(j))] = 0.0
        for k in pairs.neg_partners[a]:
            gap = s[a, k] - params.neg_margin
            if gap > 0:
                value += gap * inv
                grad_sim[(a, int(k))] = inv
            else:
                grad_sim[(a, int(k))] = 0.0
    return LossOutput(value=float(value), grad_sim=grad_sim,
                      grad_threshold=0.0, anchors_used=len(active))


def embedding_gradients(grad_sim: dict[tuple[int, int], float], embeddings: np.ndarray) -> np.ndarray:
    """Chain sparse dL/dS entries into dL/d(embeddings) for S_ij = <e_i, e_j>."""
    e = np.asarray(embeddings, dtype=np.float64)
    grad = np.zeros_like(e)
    for (i, j), g in grad_sim.items():
        grad[i] += g * e[j]
        grad[j] += g * e[i]
    return grad
