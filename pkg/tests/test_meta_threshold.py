"""Threshold generator: lookahead step, meta loss, finite-difference
meta-gradient (against an analytic chain-rule oracle), and the update rule."""

import numpy as np
import pytest
from dataclasses import replace

from pairmine.losses import LossParams, embedding_gradients, sigmoid, soft_contrastive
from pairmine.meta_threshold import (
    MetaConfig,
    StarvedMetaBatchError,
    generate_threshold,
    lookahead_params,
    meta_batches_from,
    meta_gradient_fd,
    meta_loss,
    update_threshold,
)
from pairmine.mining import MinedPairs, MiningConfig, mine_asymmetric, similarity_matrix
from pairmine.model import backward, forward, init_net, sgd_step
from pairmine import data

MINING = MiningConfig(mode="asymmetric", pos_tolerance=0.3, neg_tolerance=0.3)


def micro_problem(seed=0, dim=2, hidden=3, emb_dim=2, batch=6, n_classes=2):
    """Tiny net plus clustered batches with surviving mined pairs."""
    rng = np.random.default_rng(seed)
    net = init_net((dim, hidden, emb_dim), seed=seed + 1)
    centers = rng.standard_normal((n_classes, dim)) * 2.0
    labels = np.arange(batch) % n_classes
    inputs = centers[labels] + 0.5 * rng.standard_normal((batch, dim))
    emb = forward(net, inputs)
    sim = similarity_matrix(emb, labels)
    pairs = mine_asymmetric(sim, MINING.pos_tolerance, MINING.neg_tolerance)
    return net, inputs, labels, pairs


def starved_pairs(size):
    return MinedPairs(pos_partners=[np.array([], dtype=int)] * size,
                      neg_partners=[np.array([], dtype=int)] * size)


class TestLookahead:
    def test_zero_rate_returns_same_params(self):
        net, x, y, pairs = micro_problem()
        stepped, starved = lookahead_params(net, x, y, pairs, LossParams(), 0.0)
        assert not starved
        for a, b in zip(net.weights, stepped.weights):
            np.testing.assert_array_equal(a, b)

    def test_starved_batch_flagged(self):
        net, x, y, _ = micro_problem()
        stepped, starved = lookahead_params(net, x, y, starved_pairs(len(y)), LossParams(), 0.1)
        assert starved
        assert stepped is net

    def test_threshold_sensitivity(self):
        net, x, y, pairs = micro_problem(seed=3)
        a, _ = lookahead_params(net, x, y, pairs, LossParams(threshold=0.4), 0.05)
        b, _ = lookahead_params(net, x, y, pairs, LossParams(threshold=0.9), 0.05)
        assert any(not np.array_equal(wa, wb) for wa, wb in zip(a.weights, b.weights))

    def test_original_net_untouched(self):
        net, x, y, pairs = micro_problem(seed=5)
        snapshot = [w.copy() for w in net.weights]
        lookahead_params(net, x, y, pairs, LossParams(), 0.1)
        for w, s in zip(net.weights, snapshot):
            np.testing.assert_array_equal(w, s)


class TestMetaLoss:
    def test_equals_train_loss_on_same_batch(self):
        net, x, y, _ = micro_problem(seed=5)
        emb = forward(net, x)
        sim = similarity_matrix(emb, y)
        pairs = mine_asymmetric(sim, MINING.pos_tolerance, MINING.neg_tolerance)
        params = LossParams()
        assert meta_loss(net, x, y, params, MINING) == pytest.approx(
            soft_contrastive(sim, pairs, params).value)

    def test_starved_meta_batch_raises(self):
        # orthogonal per-class embeddings: every pair is already easy
        net = init_net((4, 8, 4), seed=6)
        inputs = np.vstack([np.eye(4) * 10.0, np.eye(4) * 10.0])
        labels = np.tile(np.arange(4), 2)
        tight = replace(MINING, pos_tolerance=0.0, neg_tolerance=0.0)
        emb = inputs / np.linalg.norm(inputs, axis=1, keepdims=True)
        sim = similarity_matrix(emb, labels)
        assert mine_asymmetric(sim, 0.0, 0.0).is_empty  # sanity: structure starves
        with pytest.raises(StarvedMetaBatchError):
            meta_loss(_identity_like(net, inputs), inputs, labels, LossParams(), tight)

    def test_descent_after_lookahead_on_meta_batch(self):
        net, x, y, pairs = micro_problem(seed=7)
        params = LossParams(threshold=0.6, pos_scale=2.0, neg_scale=10.0)
        emb = forward(net, x)
        sim = similarity_matrix(emb, y)
        before = soft_contrastive(sim, pairs, params).value
        stepped, _ = lookahead_params(net, x, y, pairs, params, 1e-3)
        emb2 = forward(stepped, x)
        after = soft_contrastive(similarity_matrix(emb2, y), pairs, params).value
        assert after < before


def _identity_like(net, inputs):
    """Net whose forward reproduces L2-normalized inputs (single big layer)."""
    from pairmine.model import EmbeddingNet

    d = inputs.shape[1]
    return EmbeddingNet(layer_dims=(d, d), weights=[np.eye(d)], biases=[np.zeros(d)])


class TestMetaGradient:
    def test_zero_lookahead_rate_gives_exact_zero(self):
        net, x, y, pairs = micro_problem(seed=8)
        cfg = MetaConfig(lookahead_lr=0.0)
        g = meta_gradient_fd(net, x, y, pairs, x, y, LossParams(), MINING, cfg)
        assert g == 0.0

    def test_starved_main_batch_gives_zero(self):
        net, x, y, _ = micro_problem(seed=9)
        cfg = MetaConfig(lookahead_lr=0.1)
        g = meta_gradient_fd(net, x, y, starved_pairs(len(y)), x, y, LossParams(), MINING, cfg)
        assert g == 0.0

    def test_central_difference_antisymmetry(self):
        net, x, y, pairs = micro_problem(seed=10)
        cfg = MetaConfig(lookahead_lr=0.05, fd_step=1e-3)
        params = LossParams(threshold=0.6)
        g = meta_gradient_fd(net, x, y, pairs, x, y, params, MINING, cfg)

        # rebuild both lookaheads by hand and swap their roles
        center, _ = lookahead_params(net, x, y, pairs, params, 0.05)
        frozen = mine_asymmetric(
            similarity_matrix(forward(center, x), y), MINING.pos_tolerance, MINING.neg_tolerance)
        plus, _ = lookahead_params(net, x, y, pairs, replace(params, threshold=0.6 + 1e-3), 0.05)
        minus, _ = lookahead_params(net, x, y, pairs, replace(params, threshold=0.6 - 1e-3), 0.05)

        def frozen_loss(n):
            return soft_contrastive(similarity_matrix(forward(n, x), y), frozen, params).value

        swapped = (frozen_loss(minus) - frozen_loss(plus)) / (2 * 1e-3)
        assert swapped == pytest.approx(-g, rel=1e-12)

    def test_matches_analytic_chain_rule_on_micro_net(self):
        # <= 20-parameter net: dims (2,3,2) has 2*3+3+3*2+2 = 17 parameters
        net, x, y, pairs = micro_problem(seed=5)
        n_params = sum(w.size for w in net.weights) + sum(b.size for b in net.biases)
        assert n_params <= 20

        params = LossParams(threshold=0.6, pos_scale=2.0, neg_scale=10.0)
        psi = 0.05
        cfg = MetaConfig(lookahead_lr=psi, fd_step=1e-3)

        meta_x, meta_y = x, y
        g_fd = meta_gradient_fd(net, x, y, pairs, meta_x, meta_y, params, MINING, cfg)

        g_an = analytic_meta_gradient(net, x, y, pairs, meta_x, meta_y, params, MINING, psi)
        assert abs(g_fd) > 1e-8, "degenerate instance: gradient too small to compare"
        assert g_fd == pytest.approx(g_an, rel=1e-3)


def analytic_meta_gradient(net, x, y, pairs, meta_x, meta_y, params, mining_cfg, psi):
    """Chain rule oracle: d(meta loss)/d(threshold) through the lookahead.

    theta_hat = theta - psi * dL/dtheta, so d(theta_hat)/d(threshold) is
    -psi * d/d(threshold)[dL/dtheta]; backward is linear in its upstream
    embedding gradient, so differentiating the sparse dL/dS entries w.r.t.
    the threshold and pushing them through the same backward gives the
    mixed second derivative exactly.
    """
    emb = forward(net, x)
    sim = similarity_matrix(emb, y)
    out = soft_contrastive(sim, pairs, params)

    mu, nu, thr = params.pos_scale, params.neg_scale, params.threshold
    active = out.anchors_used
    dgrad_dthr = {}
    for a in range(len(y)):
        pos = pairs.pos_partners[a]
        neg = pairs.neg_partners[a]
        if len(pos):
            sig = sigmoid(mu * (thr - sim.values[a, pos]))
            for j, sg in zip(pos, sig):
                dgrad_dthr[(a, int(j))] = -mu * sg * (1 - sg) / (active * len(pos))
        if len(neg):
            sig = sigmoid(nu * (sim.values[a, neg] - thr))
            for k, sg in zip(neg, sig):
                dgrad_dthr[(a, int(k))] = -nu * sg * (1 - sg) / (active * len(neg))

    dtheta_dthr = backward(net, x, embedding_gradients(dgrad_dthr, emb))
    # scale by -psi to get d(theta_hat)/d(threshold)

    center = sgd_step(net, backward(net, x, embedding_gradients(out.grad_sim, emb)), psi)
    center_emb = forward(center, meta_x)
    center_sim = similarity_matrix(center_emb, meta_y)
    frozen = mine_asymmetric(center_sim, *mining_cfg.static_tolerances())
    meta_out = soft_contrastive(center_sim, frozen, params)
    meta_grads = backward(center, meta_x, embedding_gradients(meta_out.grad_sim, center_emb))

    total = 0.0
    for gm, dt in zip(meta_grads.weights, dtheta_dthr.weights):
        total += float(np.sum(gm * (-psi) * dt))
    for gm, dt in zip(meta_grads.biases, dtheta_dthr.biases):
        total += float(np.sum(gm * (-psi) * dt))
    return total


class TestUpdateThreshold:
    def test_zero_gradient_incremental_identity(self):
        assert update_threshold(0.7, 0.0, 0.2, "incremental") == 0.7

    def test_clamp_fires(self):
        assert update_threshold(0.7, 5.0, 0.2, "incremental") == 0.0

    def test_literal_mode(self):
        assert update_threshold(0.7, -2.0, 0.1, "literal") == pytest.approx(0.2)
        assert update_threshold(0.7, 2.0, 0.1, "literal") == 0.0

    def test_plain_descent(self):
        assert update_threshold(0.7, 1.0, 0.1, "incremental") == pytest.approx(0.6)

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            update_threshold(0.7, 1.0, 0.1, "momentum")

    def test_negative_step_rejected(self):
        with pytest.raises(ValueError):
            update_threshold(0.7, 1.0, -0.1)


class TestGenerateThreshold:
    def test_zero_step_disables_generator(self):
        net, x, y, pairs = micro_problem(seed=12)
        cfg = MetaConfig(lookahead_lr=0.05, threshold_lr=0.0)
        thr, _ = generate_threshold(net, x, y, pairs, [(x, y)], LossParams(threshold=0.7), MINING, cfg)
        assert thr == 0.7

    def test_result_nonnegative(self):
        for seed in (1, 2, 5, 7, 10, 15):
            net, x, y, pairs = micro_problem(seed=seed)
            cfg = MetaConfig(lookahead_lr=0.1, threshold_lr=50.0)  # huge step to stress the clamp
            thr, _ = generate_threshold(net, x, y, pairs, [(x, y)], LossParams(), MINING, cfg)
            assert thr >= 0.0

    def test_epoch_of_identical_batches_equals_single(self):
        net, x, y, pairs = micro_problem(seed=13)
        cfg = MetaConfig(lookahead_lr=0.05, threshold_lr=0.01)
        single, g1 = generate_threshold(net, x, y, pairs, [(x, y)], LossParams(), MINING, cfg)
        epoch, g3 = generate_threshold(net, x, y, pairs, [(x, y)] * 3, LossParams(), MINING, cfg)
        assert single == pytest.approx(epoch)
        assert g1 == pytest.approx(g3)

    def test_empty_meta_batches_rejected(self):
        net, x, y, pairs = micro_problem(seed=14)
        with pytest.raises(ValueError):
            generate_threshold(net, x, y, pairs, [], LossParams(), MINING,
                               MetaConfig(lookahead_lr=0.1))


class TestMetaBatches:
    def test_single_batch_is_whole_meta_set(self):
        ds = data.gen_gaussian_clusters(4, 10, 5, 0.3, seed=0)
        meta_set = data.build_meta_set(ds, per_class=5, seed=1)
        batches = meta_batches_from(meta_set, MetaConfig(meta_pass="single_batch"), np.random.default_rng(0))
        assert len(batches) == 1
        np.testing.assert_array_equal(batches[0][0], meta_set.features)

    def test_full_epoch_covers_meta_set_size(self):
        ds = data.gen_gaussian_clusters(8, 10, 5, 0.3, seed=0)
        meta_set = data.build_meta_set(ds, per_class=5, seed=1)  # 40 rows
        cfg = MetaConfig(meta_pass="full_epoch", meta_batch_size=20, meta_per_class=5)
        batches = meta_batches_from(meta_set, cfg, np.random.default_rng(0))
        assert len(batches) == 2
        for feats, labels in batches:
            assert len(labels) == 20
            _, counts = np.unique(labels, return_counts=True)
            assert (counts == 5).all()


class TestMetaConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            MetaConfig(fd_step=0.0)
        with pytest.raises(ValueError):
            MetaConfig(update_mode="exponential")
        with pytest.raises(ValueError):
            MetaConfig(threshold_lr=-1.0)
