"""Training loop: sample, embed, mine, (optionally) regenerate the loss
threshold, compute the loss, backprop, step.

The loop is single-threaded and deterministic: one seed fans out into
independent streams for init, batch sampling, meta-set construction and meta
batching, so toggling the generator never perturbs the main sampling stream.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import data, meta_threshold, mining, model
from .evaluation import evaluate
from .losses import LossParams, embedding_gradients, soft_contrastive

OPTIMIZERS = ("adam", "sgd")


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; aborts with the offending iteration."""


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 40
    n_instance: int = 5
    optimizer: str = "adam"
    learning_rate: float = 1e-5
    hidden_dim: int = 32
    embedding_dim: int = 16
    norm_floor: float = 0.0
    loss: LossParams = field(default_factory=LossParams)
    mining: mining.MiningConfig = field(default_factory=mining.MiningConfig)
    meta: meta_threshold.MetaConfig = field(default_factory=meta_threshold.MetaConfig)
    generator_enabled: bool = False
    seed: int = 0
    eval_every: int = 0          # epochs between evals; 0 = never during training
    recall_ks: tuple[int, ...] = (1, 2, 4, 8)

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size % self.n_instance != 0:
            raise ValueError("batch_size must be divisible by n_instance")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")


@dataclass
class IterationRecord:
    iteration: int
    epoch: int
    loss: float
    n_pos_first: int
    n_neg_first: int
    n_pos: int
    n_neg: int
    imbalance: float
    pos_tolerance: float
    neg_tolerance: float
    threshold: float
    anchors_used: int
    starved: bool


@dataclass
class EvalRecord:
    iteration: int
    epoch: int
    recall_at: dict[int, float]
    nmi: float


@dataclass
class MetricsLog:
    """Append-only per-iteration and per-eval records."""

    iterations: list[IterationRecord] = field(default_factory=list)
    evals: list[EvalRecord] = field(default_factory=list)

    def to_json_lines(self) -> str:
        lines = []
        for rec in self.iterations:
            lines.append(json.dumps({"type": "iteration", **asdict(rec)}, sort_keys=True))
        for rec in self.evals:
            doc = asdict(rec)
            doc["recall_at"] = {str(k): v for k, v in sorted(rec.recall_at.items())}
            lines.append(json.dumps({"type": "eval", **doc}, sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json_lines())


class Trainer:
    """Owns the mutable training state; all heavy math lives in the pure
    modules. Evaluation reads an immutable copy of the parameters."""

    def __init__(self, config: TrainConfig, dataset: data.LabeledDataset,
                 eval_dataset: data.LabeledDataset | None = None):
        self.config = config
        self.dataset = dataset
        self.eval_dataset = eval_dataset

        init_ss, sampler_ss, meta_set_ss, meta_batch_ss = np.random.SeedSequence(config.seed).spawn(4)
        self.net = model.init_net(
            (dataset.dim, config.hidden_dim, config.embedding_dim),
            seed=init_ss, norm_floor=config.norm_floor)
        self.sampler_rng = np.random.default_rng(sampler_ss)
        self.meta_rng = np.random.default_rng(meta_batch_ss)

        self.meta_cfg = config.meta
        if self.meta_cfg.lookahead_lr is None:
            self.meta_cfg = replace(self.meta_cfg, lookahead_lr=config.learning_rate)
        self.meta_set = None
        if config.generator_enabled:
            self.meta_set = data.build_meta_set(dataset, self.meta_cfg.meta_per_class, seed=meta_set_ss)

        self.adam = model.init_adam(self.net) if config.optimizer == "adam" else None
        self.threshold = config.loss.threshold
        self.iteration = 0
        self.epochs_done = 0
        self.log = MetricsLog()
        self.total_pos, self.total_neg = mining.pair_counts(config.batch_size, config.n_instance)

    @property
    def iters_per_epoch(self) -> int:
        return len(self.dataset) // self.config.batch_size

    def run(self, epochs: int | None = None) -> None:
        """Run the given number of epochs (default: the configured count)."""
        todo = self.config.epochs - self.epochs_done if epochs is None else epochs
        for _ in range(max(todo, 0)):
            epoch = self.epochs_done
            for _ in range(self.iters_per_epoch):
                self._step(epoch)
            self.epochs_done += 1
            if self.config.eval_every and self.epochs_done % self.config.eval_every == 0:
                self._evaluate(epoch)

    def _step(self, epoch: int) -> None:
        cfg = self.config
        batch = data.pk_sample(self.dataset, cfg.batch_size, cfg.n_instance, self.sampler_rng)
        inputs = self.dataset.features[batch.indices]
        emb = model.forward(self.net, inputs)
        sim = mining.similarity_matrix(emb, batch.labels)
        pairs, decision = mining.mine(sim, cfg.mining, self.total_pos)

        if decision is not None:
            n_pos_first, n_neg_first = decision.n_pos_first, decision.n_neg_first
            imbalance = decision.imbalance
            pos_tol, neg_tol = decision.pos_tolerance, decision.neg_tolerance
        else:
            n_pos_first, n_neg_first = pairs.n_pos, pairs.n_neg
            imbalance = pairs.n_neg / self.total_pos if self.total_pos else 0.0
            pos_tol, neg_tol = cfg.mining.static_tolerances()

        starved = pairs.is_empty
        if not starved and cfg.generator_enabled and self.iteration % self.meta_cfg.period == 0:
            meta_batches = meta_threshold.meta_batches_from(self.meta_set, self.meta_cfg, self.meta_rng)
            params_now = replace(cfg.loss, threshold=self.threshold)
            self.threshold, _ = meta_threshold.generate_threshold(
                self.net, inputs, batch.labels, pairs, meta_batches,
                params_now, cfg.mining, self.meta_cfg)

        params = replace(cfg.loss, threshold=self.threshold)
        out = soft_contrastive(sim, pairs, params)

        if not starved:
            if not np.isfinite(out.value):
                raise TrainingDivergedError(
                    f"non-finite loss {out.value} at iteration {self.iteration} (epoch {epoch})")
            grads = model.backward(self.net, inputs, embedding_gradients(out.grad_sim, emb))
            if self.adam is not None:
                self.net, self.adam = model.adam_step(self.adam, self.net, grads, cfg.learning_rate)
            else:
                self.net = model.sgd_step(self.net, grads, cfg.learning_rate)

        self.log.iterations.append(IterationRecord(
            iteration=self.iteration,
            epoch=epoch,
            loss=float(out.value),
            n_pos_first=n_pos_first,
            n_neg_first=n_neg_first,
            n_pos=pairs.n_pos,
            n_neg=pairs.n_neg,
            imbalance=float(imbalance),
            pos_tolerance=float(pos_tol),
            neg_tolerance=float(neg_tol),
            threshold=float(self.threshold),
            anchors_used=out.anchors_used,
            starved=starved,
        ))
        self.iteration += 1

    def _evaluate(self, epoch: int) -> None:
        ds = self.eval_dataset if self.eval_dataset is not None else self.dataset
        emb = model.forward(self.net, ds.features)
        ks = tuple(k for k in self.config.recall_ks if k < len(ds))
        report = evaluate(emb, ds.labels, ks=ks, seed=self.config.seed)
        self.log.evals.append(EvalRecord(
            iteration=self.iteration, epoch=epoch,
            recall_at=report.recall_at, nmi=report.nmi))

    # -- full-state checkpointing (exact resume) ---------------------------

    def save_state(self, path) -> None:
        extra_arrays = {}
        if self.adam is not None:
            for layer in range(self.net.n_layers):
                extra_arrays[f"adam_mW{layer}"] = self.adam.m_weights[layer]
                extra_arrays[f"adam_vW{layer}"] = self.adam.v_weights[layer]
                extra_arrays[f"adam_mb{layer}"] = self.adam.m_biases[layer]
                extra_arrays[f"adam_vb{layer}"] = self.adam.v_biases[layer]
        meta = {
            "kind": "trainer-state",
            "threshold": self.threshold,
            "iteration": self.iteration,
            "epochs_done": self.epochs_done,
            "adam_step": self.adam.step if self.adam is not None else None,
            "sampler_rng": self.sampler_rng.bit_generator.state,
            "meta_rng": self.meta_rng.bit_generator.state,
        }
        model.save_params(self.net, path, extra_meta=meta, extra_arrays=extra_arrays)

    @classmethod
    def from_state(cls, path, config: TrainConfig, dataset: data.LabeledDataset,
                   eval_dataset: data.LabeledDataset | None = None) -> "Trainer":
        trainer = cls(config, dataset, eval_dataset)
        net, meta, extras = model.load_params(path)
        if meta.get("kind") != "trainer-state":
            raise model.CheckpointFormatError(f"{path}: not a trainer-state checkpoint")
        trainer.net = net
        trainer.threshold = float(meta["threshold"])
        trainer.iteration = int(meta["iteration"])
        trainer.epochs_done = int(meta["epochs_done"])
        trainer.sampler_rng.bit_generator.state = meta["sampler_rng"]
        trainer.meta_rng.bit_generator.state = meta["meta_rng"]
        if config.optimizer == "adam":
            adam = model.init_adam(net)
            adam.step = int(meta["adam_step"])
            for layer in range(net.n_layers):
                adam.m_weights[layer] = extras[f"adam_mW{layer}"]
                adam.v_weights[layer] = extras[f"adam_vW{layer}"]
                adam.m_biases[layer] = extras[f"adam_mb{layer}"]
                adam.v_biases[layer] = extras[f"adam_vb{layer}"]
            trainer.adam = adam
        return trainer


def train(config: TrainConfig, dataset: data.LabeledDataset,
          eval_dataset: data.LabeledDataset | None = None) -> tuple[model.EmbeddingNet, MetricsLog]:
    """Run the configured number of epochs; deterministic per (config, dataset)."""
    trainer = Trainer(config, dataset, eval_dataset)
    trainer.run()
    return trainer.net, trainer.log


def checkpoint(net: model.EmbeddingNet, threshold: float, path) -> None:
    """Versioned text checkpoint of the parameters plus the loss threshold."""
    model.save_params(net, path, extra_meta={"kind": "checkpoint", "threshold": float(threshold)})


def restore(path) -> tuple[model.EmbeddingNet, float]:
    net, meta, _ = model.load_params(path)
    if "threshold" not in meta:
        raise model.CheckpointFormatError(f"{path}: checkpoint has no threshold entry")
    return net, float(meta["threshold"])
