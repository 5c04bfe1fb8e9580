"""Pair mining over a cosine-similarity matrix.

Four modes, all anchored on per-row extrema with strict inequalities:

  base        keep a positive when it is less similar than the anchor's most
              similar negative; keep a negative when it is more similar than
              the anchor's least similar positive.
  symmetric   same, with one tolerance widening both bands.
  asymmetric  separate tolerances for the positive and negative bands.
  adaptive    asymmetric with a second pass: when mined negatives outnumber
              the batch's total positive-pair budget, the positive tolerance
              is widened and the negative one tightened by a sigmoid-gated
              bump, and the batch is re-mined.

Every operation is a pure function of (similarities, labels, config).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MINING_MODES = ("base", "symmetric", "asymmetric", "adaptive")

_SYM_TOL = 1e-9
_UNIT_ROW_TOL = 1e-10


@dataclass
class SimilarityMatrix:
    """B x B cosine similarities with the batch labels."""

    values: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        b = len(self.labels)
        if self.values.shape != (b, b) or b == 0:
            raise ValueError(f"similarities must be ({b}, {b}), got {self.values.shape}")
        if not np.allclose(self.values, self.values.T, atol=_SYM_TOL, rtol=0):
            raise ValueError("similarity matrix is not symmetric")
        if not np.allclose(np.diag(self.values), 1.0, atol=_SYM_TOL, rtol=0):
            raise ValueError("diagonal must be 1 (unit-norm embeddings)")
        if self.values.max() > 1.0 + _SYM_TOL or self.values.min() < -1.0 - _SYM_TOL:
            raise ValueError("entries outside [-1, 1]")

    @property
    def size(self) -> int:
        return len(self.labels)


def similarity_matrix(embeddings: np.ndarray, labels: np.ndarray) -> SimilarityMatrix:
    """Pairwise dot products of unit-norm embeddings, symmetrized."""
    e = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(e, axis=1)
    if not np.allclose(norms, 1.0, atol=_UNIT_ROW_TOL, rtol=0):
        worst = int(np.argmax(np.abs(norms - 1.0)))
        raise ValueError(f"embedding row {worst} has norm {norms[worst]:.12f}, expected 1")
    s = e @ e.T
    s = 0.5 * (s + s.T)
    return SimilarityMatrix(values=s, labels=np.asarray(labels))


def pair_counts(batch_size: int, n_instance: int) -> tuple[int, int]:
    """Total (positive, negative) pair counts of a P-K batch.

    N_pos = (B*K - B)/2 and N_neg = (B^2 - B*K)/2 for B = batch_size,
    K = n_instance.
    """
    if n_instance < 1 or batch_size < 1 or batch_size % n_instance != 0:
        raise ValueError(f"batch_size {batch_size} must be a positive multiple of n_instance {n_instance}")
    n_pos = (batch_size * n_instance - batch_size) // 2
    n_neg = (batch_size * batch_size - batch_size * n_instance) // 2
    return n_pos, n_neg


@dataclass
class MinedPairs:
    """Per-anchor surviving partner indices.

    An (i, j) entry in ``pos_partners[i]`` means the ordered pair with anchor
    i survived positive mining; an unordered pair can appear from both
    endpoints, which is intended (the loss consumes per-anchor lists).
    Anchors lacking positive or negative candidates are skipped entirely and
    recorded in ``skipped_anchors``.
    """

    pos_partners: list[np.ndarray]
    neg_partners: list[np.ndarray]
    skipped_anchors: list[int] = field(default_factory=list)

    @property
    def n_pos(self) -> int:
        return sum(len(p) for p in self.pos_partners)

    @property
    def n_neg(self) -> int:
        return sum(len(p) for p in self.neg_partners)

    @property
    def anchors_used(self) -> int:
        return sum(1 for p, n in zip(self.pos_partners, self.neg_partners) if len(p) or len(n))

    @property
    def is_empty(self) -> bool:
        return self.n_pos == 0 and self.n_neg == 0

    def pos_pairs(self) -> set[tuple[int, int]]:
        return {(i, int(j)) for i, ps in enumerate(self.pos_partners) for j in ps}

    def neg_pairs(self) -> set[tuple[int, int]]:
        return {(i, int(j)) for i, ns in enumerate(self.neg_partners) for j in ns}


@dataclass
class MiningConfig:
    """Mode plus its thresholds; adapt_scale gates the adaptive bump."""

    mode: str = "adaptive"
    tolerance: float = 0.1        # symmetric mode
    pos_tolerance: float = 0.1    # asymmetric/adaptive modes
    neg_tolerance: float = 0.01
    adapt_scale: float = 0.5      # adaptive mode only

    def __post_init__(self):
        if self.mode not in MINING_MODES:
            raise ValueError(f"mode must be one of {MINING_MODES}, got {self.mode!r}")
        for name in ("tolerance", "pos_tolerance", "neg_tolerance", "adapt_scale"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.adapt_scale < 0:
            raise ValueError("adapt_scale must be >= 0")

    def static_tolerances(self) -> tuple[float, float]:
        """The (positive, negative) tolerances before any adaptation."""
        if self.mode == "base":
            return 0.0, 0.0
        if self.mode == "symmetric":
            return self.tolerance, self.tolerance
        return self.pos_tolerance, self.neg_tolerance


@dataclass
class MiningDecision:
    """Record of one adaptive-tolerance check.

    imbalance is mined negatives over the batch's total positive-pair count;
    the bump fires only when it exceeds 1, in which case pos_tolerance grows
    by pos_adjust and neg_tolerance shrinks by neg_adjust.
    """

    n_pos_first: int
    n_neg_first: int
    imbalance: float
    gate: float
    pos_adjust: float
    neg_adjust: float
    pos_tolerance: float
    neg_tolerance: float
    adjusted: bool


def _mine(sim: SimilarityMatrix, pos_tol: float, neg_tol: float) -> MinedPairs:
    s = sim.values
    labels = sim.labels
    b = sim.size
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    diff = labels[:, None] != labels[None, :]

    has_pos = same.any(axis=1)
    has_neg = diff.any(axis=1)
    valid = has_pos & has_neg

    max_neg = np.where(diff, s, -np.inf).max(axis=1)
    min_pos = np.where(same, s, np.inf).min(axis=1)

    keep_pos = same & (s < (max_neg + pos_tol)[:, None]) & valid[:, None]
    keep_neg = diff & (s > (min_pos - neg_tol)[:, None]) & valid[:, None]

    return MinedPairs(
        pos_partners=[np.flatnonzero(keep_pos[i]) for i in range(b)],
        neg_partners=[np.flatnonzero(keep_neg[i]) for i in range(b)],
        skipped_anchors=[int(i) for i in np.flatnonzero(~valid)],
    )


def mine_base(sim: SimilarityMatrix) -> MinedPairs:
    """Relative mining with no tolerance: strict comparison against the
    anchor's hardest negative (for positives) and hardest positive (for
    negatives)."""
    return _mine(sim, 0.0, 0.0)


def mine_symmetric(sim: SimilarityMatrix, tolerance: float) -> MinedPairs:
    """Relative mining with one tolerance widening both bands."""
    return _mine(sim, tolerance, tolerance)


def mine_asymmetric(sim: SimilarityMatrix, pos_tolerance: float, neg_tolerance: float) -> MinedPairs:
    """Keep positive (i,j) iff S_ij < max_neg_i + pos_tolerance and negative
    (i,k) iff S_ik > min_pos_i - neg_tolerance."""
    return _mine(sim, pos_tolerance, neg_tolerance)


def adapt_tolerances(
    pos_tolerance: float,
    neg_tolerance: float,
    adapt_scale: float,
    n_neg_mined: int,
    total_pos_pairs: int,
    n_pos_mined: int = 0,
) -> MiningDecision:
    """Sigmoid-gated tolerance adjustment, fired only when mined negatives
    exceed the batch's total positive-pair budget."""
    if total_pos_pairs <= 0:
        raise ValueError("total_pos_pairs must be positive")
    imbalance = n_neg_mined / total_pos_pairs
    if imbalance > 1.0:
        gate = 1.0 / (1.0 + np.exp(-imbalance))
        pos_adj = adapt_scale * pos_tolerance * gate
        neg_adj = adapt_scale * neg_tolerance * gate
        return MiningDecision(
            n_pos_first=n_pos_mined,
            n_neg_first=n_neg_mined,
            imbalance=imbalance,
            gate=float(gate),
            pos_adjust=float(pos_adj),
            neg_adjust=float(neg_adj),
            pos_tolerance=float(pos_tolerance + pos_adj),
            neg_tolerance=float(neg_tolerance - neg_adj),
            adjusted=True,
        )
    return MiningDecision(
        n_pos_first=n_pos_mined,
        n_neg_first=n_neg_mined,
        imbalance=imbalance,
        gate=0.0,
        pos_adjust=0.0,
        neg_adjust=0.0,
        pos_tolerance=float(pos_tolerance),
        neg_tolerance=float(neg_tolerance),
        adjusted=False,
    )


def mine_adaptive(sim: SimilarityMatrix, config: MiningConfig, total_pos_pairs: int) -> tuple[MinedPairs, MiningDecision]:
    """Two-pass adaptive mining: static asymmetric pass, tolerance check,
    then a re-mine with the adjusted tolerances when the check fires."""
    first = mine_asymmetric(sim, config.pos_tolerance, config.neg_tolerance)
    decision = adapt_tolerances(
        config.pos_tolerance,
        config.neg_tolerance,
        config.adapt_scale,
        n_neg_mined=first.n_neg,
        total_pos_pairs=total_pos_pairs,
        n_pos_mined=first.n_pos,
    )
    if decision.adjusted:
        second = mine_asymmetric(sim, decision.pos_tolerance, decision.neg_tolerance)
    else:
        second = first
    return second, decision


def mine(sim: SimilarityMatrix, config: MiningConfig, total_pos_pairs: int | None = None
         ) -> tuple[MinedPairs, MiningDecision | None]:
    """Dispatch on config.mode; adaptive mode needs the batch pair budget."""
    if config.mode == "base":
        return mine_base(sim), None
    if config.mode == "symmetric":
        return mine_symmetric(sim, config.tolerance), None
    if config.mode == "asymmetric":
        return mine_asymmetric(sim, config.pos_tolerance, config.neg_tolerance), None
    if total_pos_pairs is None:
        raise ValueError("adaptive mode needs total_pos_pairs")
    return mine_adaptive(sim, config, total_pos_pairs)
