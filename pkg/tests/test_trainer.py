"""Trainer: determinism, starved batches, checkpointing, resume, logging."""

import numpy as np
import pytest
from dataclasses import replace

import pairmine.trainer as trainer_mod
from pairmine import data, mining, model
from pairmine.losses import LossOutput, LossParams
from pairmine.meta_threshold import MetaConfig
from pairmine.mining import MiningConfig
from pairmine.trainer import (
    MetricsLog,
    TrainConfig,
    Trainer,
    TrainingDivergedError,
    checkpoint,
    restore,
    train,
)


@pytest.fixture(scope="module")
def dataset():
    return data.gen_gaussian_clusters(6, 20, 8, 0.4, seed=0)


def quick_config(**kw):
    base = dict(epochs=2, batch_size=20, n_instance=5, optimizer="adam",
                learning_rate=1e-3, hidden_dim=12, embedding_dim=6, seed=17)
    base.update(kw)
    return TrainConfig(**base)


class TestTrainLoop:
    def test_zero_epochs(self, dataset):
        net, log = train(quick_config(epochs=0), dataset)
        assert log.iterations == []
        ref = model.init_net((8, 12, 6), seed=np.random.SeedSequence(17).spawn(4)[0])
        for a, b in zip(net.weights, ref.weights):
            np.testing.assert_array_equal(a, b)

    def test_deterministic_logs_and_params(self, dataset):
        cfg = quick_config()
        net_a, log_a = train(cfg, dataset)
        net_b, log_b = train(cfg, dataset)
        assert log_a.to_json_lines() == log_b.to_json_lines()
        for a, b in zip(net_a.weights, net_b.weights):
            np.testing.assert_array_equal(a, b)

    def test_iteration_count(self, dataset):
        cfg = quick_config(epochs=3)
        _, log = train(cfg, dataset)
        assert len(log.iterations) == 3 * (len(dataset) // cfg.batch_size)

    def test_starved_run_keeps_params(self, dataset):
        # an impossible tolerance starves every batch: logged, never fatal
        cfg = quick_config(mining=MiningConfig(mode="symmetric", tolerance=-2.0))
        net, log = train(cfg, dataset)
        assert log.iterations and all(r.starved for r in log.iterations)
        assert all(r.n_pos == 0 and r.n_neg == 0 for r in log.iterations)
        ref = model.init_net((8, 12, 6), seed=np.random.SeedSequence(17).spawn(4)[0])
        for a, b in zip(net.weights, ref.weights):
            np.testing.assert_array_equal(a, b)

    def test_logged_counts_match_mined_pairs(self, dataset, monkeypatch):
        seen = []
        real_mine = mining.mine

        def spy(sim, config, total_pos_pairs=None):
            pairs, decision = real_mine(sim, config, total_pos_pairs)
            seen.append((pairs.n_pos, pairs.n_neg))
            return pairs, decision

        monkeypatch.setattr(trainer_mod.mining, "mine", spy)
        _, log = train(quick_config(epochs=1), dataset)
        assert [(r.n_pos, r.n_neg) for r in log.iterations] == seen

    def test_nan_loss_aborts_with_diagnostic(self, dataset, monkeypatch):
        def poisoned(sim, pairs, params):
            return LossOutput(value=float("nan"), grad_sim={}, grad_threshold=0.0, anchors_used=1)

        monkeypatch.setattr(trainer_mod, "soft_contrastive", poisoned)
        with pytest.raises(TrainingDivergedError, match="iteration 0"):
            train(quick_config(epochs=1), dataset)

    def test_eval_cadence(self, dataset):
        cfg = quick_config(epochs=4, eval_every=2, recall_ks=(1, 2))
        _, log = train(cfg, dataset, eval_dataset=dataset)
        assert len(log.evals) == 2
        assert all(0.0 <= r.recall_at[1] <= 1.0 for r in log.evals)

    def test_sgd_optimizer_path(self, dataset):
        cfg = quick_config(optimizer="sgd", learning_rate=0.05)
        net, log = train(cfg, dataset)
        assert not any(r.starved for r in log.iterations[:3])

    def test_threshold_trace_nonnegative_with_literal_generator(self, dataset):
        cfg = quick_config(
            epochs=1,
            generator_enabled=True,
            meta=MetaConfig(lookahead_lr=0.05, threshold_lr=5.0, update_mode="literal",
                            meta_per_class=5),
        )
        _, log = train(cfg, dataset)
        assert all(r.threshold >= 0.0 for r in log.iterations)

    def test_generator_updates_threshold(self, dataset):
        cfg = quick_config(
            epochs=2,
            generator_enabled=True,
            meta=MetaConfig(lookahead_lr=0.1, threshold_lr=0.5, meta_per_class=5),
        )
        _, log = train(cfg, dataset)
        thresholds = {r.threshold for r in log.iterations}
        assert len(thresholds) > 1

    def test_adaptive_decision_logged(self, dataset):
        _, log = train(quick_config(epochs=1), dataset)
        rec = log.iterations[0]
        assert rec.n_pos_first >= 0 and rec.imbalance >= 0.0
        if rec.pos_tolerance > 0.1:  # adjusted iteration
            assert rec.neg_tolerance < 0.01


class TestConfigValidation:
    def test_indivisible_batch(self):
        with pytest.raises(ValueError):
            quick_config(batch_size=21)

    def test_bad_optimizer(self):
        with pytest.raises(ValueError):
            quick_config(optimizer="rmsprop")

    def test_bad_lr(self):
        with pytest.raises(ValueError):
            quick_config(learning_rate=0.0)


class TestCheckpoint:
    def test_roundtrip_probe_forward(self, dataset, tmp_path):
        net, _ = train(quick_config(epochs=1), dataset)
        path = tmp_path / "ckpt.txt"
        checkpoint(net, 0.6125, path)
        restored, thr = restore(path)
        assert thr == 0.6125
        probe = np.random.default_rng(1).standard_normal((5, 8))
        np.testing.assert_array_equal(model.forward(net, probe), model.forward(restored, probe))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            restore(tmp_path / "missing.txt")

    def test_corrupt_file(self, tmp_path):
        p = tmp_path / "bad.txt"
        p.write_text("garbage\n")
        with pytest.raises(model.CheckpointFormatError):
            restore(p)

    def test_checkpoint_without_threshold_rejected(self, dataset, tmp_path):
        net, _ = train(quick_config(epochs=0), dataset)
        p = tmp_path / "plain.txt"
        model.save_params(net, p)
        with pytest.raises(model.CheckpointFormatError):
            restore(p)


class TestResume:
    @pytest.mark.parametrize("generator", [False, True])
    def test_resume_matches_uninterrupted_run(self, dataset, tmp_path, generator):
        cfg = quick_config(
            epochs=4,
            generator_enabled=generator,
            meta=MetaConfig(lookahead_lr=0.05, threshold_lr=0.2, meta_per_class=5),
        )
        full = Trainer(cfg, dataset)
        full.run()

        first = Trainer(cfg, dataset)
        first.run(epochs=2)
        state_path = tmp_path / "state.txt"
        first.save_state(state_path)

        resumed = Trainer.from_state(state_path, cfg, dataset)
        resumed.run()

        cut = 2 * full.iters_per_epoch
        full_tail = [r for r in full.log.iterations if r.iteration >= cut]
        assert [vars(r) for r in resumed.log.iterations] == [vars(r) for r in full_tail]
        for a, b in zip(full.net.weights, resumed.net.weights):
            np.testing.assert_array_equal(a, b)

    def test_state_file_is_restorable_checkpoint(self, dataset, tmp_path):
        t = Trainer(quick_config(epochs=1), dataset)
        t.run()
        p = tmp_path / "state.txt"
        t.save_state(p)
        net, thr = restore(p)
        assert thr == t.threshold


class TestMetricsLog:
    def test_json_lines_shape(self, dataset):
        cfg = quick_config(epochs=1, eval_every=1, recall_ks=(1,))
        _, log = train(cfg, dataset, eval_dataset=dataset)
        lines = log.to_json_lines().splitlines()
        import json
        docs = [json.loads(line) for line in lines]
        assert sum(d["type"] == "iteration" for d in docs) == len(log.iterations)
        assert sum(d["type"] == "eval" for d in docs) == 1
        for d in docs:
            if d["type"] == "iteration":
                assert {"iteration", "loss", "n_pos", "n_neg", "threshold"} <= set(d)

    def test_write(self, dataset, tmp_path):
        _, log = train(quick_config(epochs=1), dataset)
        p = tmp_path / "m.jsonl"
        log.write(p)
        assert p.read_text() == log.to_json_lines()
