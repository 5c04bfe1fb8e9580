"""Meta-learned online generator for the loss threshold.

The generator simulates one plain-SGD step on the current batch (the
lookahead), scores the stepped parameters on a small class-complete meta set,
and descends the threshold along a central finite-difference estimate of
d(meta loss)/d(threshold) through that lookahead. Mining masks and the meta
loss's own threshold are frozen at the unperturbed value, so only the
lookahead pathway varies. The live training parameters are never mutated
here; only the new threshold flows back.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import data
from .losses import LossParams, embedding_gradients, soft_contrastive
from .mining import MinedPairs, MiningConfig, mine_asymmetric, similarity_matrix
from .model import EmbeddingNet, backward, forward, sgd_step

UPDATE_MODES = ("incremental", "literal")
META_PASSES = ("single_batch", "full_epoch")


class StarvedMetaBatchError(RuntimeError):
    """Static mining left no pairs in a meta batch; the meta set should be
    constructed so this cannot happen."""


@dataclass
class MetaConfig:
    """Generator knobs.

    lookahead_lr None means "use the main learning rate" (resolved by the
    trainer). meta_pass picks between one whole-meta-set batch and averaging
    the gradient estimate over an epoch of P-K meta batches.
    """

    lookahead_lr: float | None = None
    threshold_lr: float = 0.01
    fd_step: float = 1e-3
    update_mode: str = "incremental"
    meta_pass: str = "single_batch"
    meta_batch_size: int = 40
    meta_per_class: int = 5
    period: int = 1

    def __post_init__(self):
        if self.lookahead_lr is not None and self.lookahead_lr < 0:
            raise ValueError("lookahead_lr must be >= 0")
        if self.threshold_lr < 0:
            raise ValueError("threshold_lr must be >= 0")
        if self.fd_step <= 0:
            raise ValueError("fd_step must be > 0")
        if self.update_mode not in UPDATE_MODES:
            raise ValueError(f"update_mode must be one of {UPDATE_MODES}")
        if self.meta_pass not in META_PASSES:
            raise ValueError(f"meta_pass must be one of {META_PASSES}")
        if self.meta_per_class < 1 or self.meta_batch_size < 1 or self.period < 1:
            raise ValueError("meta_per_class, meta_batch_size and period must be >= 1")


def lookahead_params(
    net: EmbeddingNet,
    inputs: np.ndarray,
    labels: np.ndarray,
    pairs: MinedPairs,
    loss_params: LossParams,
    lookahead_lr: float,
) -> tuple[EmbeddingNet, bool]:
    """One simulated SGD step of the softplus loss on this batch.

    Returns (stepped net, starved flag); a starved batch steps nowhere and
    the original net is returned unchanged.
    """
    if pairs.is_empty:
        return net, True
    emb = forward(net, inputs)
    sim = similarity_matrix(emb, labels)
    out = soft_contrastive(sim, pairs, loss_params)
    grads = backward(net, inputs, embedding_gradients(out.grad_sim, emb))
    return sgd_step(net, grads, lookahead_lr), False


def meta_loss(
    net_hat: EmbeddingNet,
    meta_inputs: np.ndarray,
    meta_labels: np.ndarray,
    loss_params: LossParams,
    mining_config: MiningConfig,
) -> float:
    """Softplus loss of the stepped net on a meta batch, mined with the
    static tolerances."""
    emb = forward(net_hat, meta_inputs)
    sim = similarity_matrix(emb, meta_labels)
    pos_tol, neg_tol = mining_config.static_tolerances()
    pairs = mine_asymmetric(sim, pos_tol, neg_tol)
    if pairs.is_empty:
        raise StarvedMetaBatchError("static mining left no pairs in the meta batch")
    return soft_contrastive(sim, pairs, loss_params).value


def _frozen_meta_loss(net_hat, meta_inputs, meta_labels, frozen_pairs, loss_params) -> float:
    emb = forward(net_hat, meta_inputs)
    sim = similarity_matrix(emb, meta_labels)
    return soft_contrastive(sim, frozen_pairs, loss_params).value


def meta_gradient_fd(
    net: EmbeddingNet,
    main_inputs: np.ndarray,
    main_labels: np.ndarray,
    main_pairs: MinedPairs,
    meta_inputs: np.ndarray,
    meta_labels: np.ndarray,
    loss_params: LossParams,
    mining_config: MiningConfig,
    meta_config: MetaConfig,
) -> float:
    """Central-difference estimate of d(meta loss)/d(threshold).

    The meta mining mask is frozen from the unperturbed lookahead and the
    meta loss always evaluates at the unperturbed threshold, so the only
    varying pathway is threshold -> lookahead step -> parameters.
    """
    if main_pairs.is_empty:
        return 0.0
    psi = meta_config.lookahead_lr
    if psi is None:
        raise ValueError("lookahead_lr must be resolved before calling meta_gradient_fd")
    h = meta_config.fd_step
    thr = loss_params.threshold

    net_center, _ = lookahead_params(net, main_inputs, main_labels, main_pairs, loss_params, psi)
    center_emb = forward(net_center, meta_inputs)
    center_sim = similarity_matrix(center_emb, meta_labels)
    pos_tol, neg_tol = mining_config.static_tolerances()
    frozen = mine_asymmetric(center_sim, pos_tol, neg_tol)
    if frozen.is_empty:
        raise StarvedMetaBatchError("static mining left no pairs in the meta batch")

    net_plus, _ = lookahead_params(
        net, main_inputs, main_labels, main_pairs, replace(loss_params, threshold=thr + h), psi)
    net_minus, _ = lookahead_params(
        net, main_inputs, main_labels, main_pairs, replace(loss_params, threshold=thr - h), psi)
    loss_plus = _frozen_meta_loss(net_plus, meta_inputs, meta_labels, frozen, loss_params)
    loss_minus = _frozen_meta_loss(net_minus, meta_inputs, meta_labels, frozen, loss_params)
    return (loss_plus - loss_minus) / (2.0 * h)


def update_threshold(threshold: float, grad: float, step: float, mode: str = "incremental") -> float:
    """Descend the threshold and clamp at zero.

    incremental: max(0, threshold - step * grad).
    literal:     max(0, -step * grad), discarding the current threshold.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    if mode not in UPDATE_MODES:
        raise ValueError(f"mode must be one of {UPDATE_MODES}")
    if mode == "incremental":
        return max(0.0, threshold - step * grad)
    return max(0.0, -step * grad)


def generate_threshold(
    net: EmbeddingNet,
    main_inputs: np.ndarray,
    main_labels: np.ndarray,
    main_pairs: MinedPairs,
    meta_batches: list[tuple[np.ndarray, np.ndarray]],
    loss_params: LossParams,
    mining_config: MiningConfig,
    meta_config: MetaConfig,
) -> tuple[float, float]:
    """New threshold from the mean finite-difference gradient over the given
    meta batches. Returns (new threshold, gradient estimate)."""
    if not meta_batches:
        raise ValueError("need at least one meta batch")
    grads = [
        meta_gradient_fd(net, main_inputs, main_labels, main_pairs,
                         mi, ml, loss_params, mining_config, meta_config)
        for mi, ml in meta_batches
    ]
    grad = float(np.mean(grads))
    new_thr = update_threshold(loss_params.threshold, grad,
                               meta_config.threshold_lr, meta_config.update_mode)
    return new_thr, grad


def meta_batches_from(meta_set: data.LabeledDataset, meta_config: MetaConfig, rng
                      ) -> list[tuple[np.ndarray, np.ndarray]]:
    """Materialize meta batches per the configured pass policy.

    single_batch uses the whole meta set at once (it covers every class by
    construction); full_epoch draws one epoch's worth of P-K batches with
    meta_per_class instances per class.
    """
    if meta_config.meta_pass == "single_batch":
        return [(meta_set.features, meta_set.labels)]
    batch_size = meta_config.meta_batch_size
    k = meta_config.meta_per_class
    n_batches = max(1, len(meta_set) // batch_size)
    rng = np.random.default_rng(rng)
    batches = []
    for _ in range(n_batches):
        b = data.pk_sample(meta_set, batch_size, k, rng)
        batches.append((meta_set.features[b.indices], b.labels))
    return batches
