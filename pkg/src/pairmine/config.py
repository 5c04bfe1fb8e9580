"""Typed INI config schema shared by every CLI subcommand.

Files are flat key=value pairs under fixed sections; unknown sections or keys
are rejected, and command-line overrides (``--set section.key=value``) are
type-checked against the same schema. Every run writes back its resolved
snapshot so outputs carry full provenance.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path

from .losses import COUNT_MODES, LossParams
from .meta_threshold import META_PASSES, UPDATE_MODES, MetaConfig
from .mining import MINING_MODES, MiningConfig
from .trainer import OPTIMIZERS, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class Field:
    type: type
    default: object
    choices: tuple | None = None
    optional: bool = False   # empty value maps to None


SCHEMA: dict[tuple[str, str], Field] = {
    ("data", "source"): Field(str, "synthetic", choices=("synthetic", "csv")),
    ("data", "path"): Field(str, "", optional=True),
    ("data", "classes"): Field(int, 8),
    ("data", "per_class"): Field(int, 125),
    ("data", "dim"): Field(int, 64),
    ("data", "spread"): Field(float, 0.3),
    ("data", "radius"): Field(float, 2.0),
    ("data", "seed"): Field(int, 7),
    ("data", "test_fraction"): Field(float, 0.2),
    ("model", "hidden_dim"): Field(int, 32),
    ("model", "embedding_dim"): Field(int, 16),
    ("model", "norm_floor"): Field(float, 0.0),
    ("mining", "mode"): Field(str, "adaptive", choices=MINING_MODES),
    ("mining", "tolerance"): Field(float, 0.1),
    ("mining", "pos_tolerance"): Field(float, 0.1),
    ("mining", "neg_tolerance"): Field(float, 0.01),
    ("mining", "adapt_scale"): Field(float, 0.5),
    ("loss", "threshold"): Field(float, 0.7),
    ("loss", "pos_scale"): Field(float, 2.0),
    ("loss", "neg_scale"): Field(float, 40.0),
    ("loss", "pos_margin"): Field(float, 0.7),
    ("loss", "neg_margin"): Field(float, 0.7),
    ("loss", "count_mode"): Field(str, "per_anchor", choices=COUNT_MODES),
    ("meta", "enabled"): Field(bool, False),
    ("meta", "lookahead_lr"): Field(float, None, optional=True),
    ("meta", "threshold_lr"): Field(float, 0.01),
    ("meta", "fd_step"): Field(float, 1e-3),
    ("meta", "update_mode"): Field(str, "incremental", choices=UPDATE_MODES),
    ("meta", "meta_pass"): Field(str, "single_batch", choices=META_PASSES),
    ("meta", "meta_batch_size"): Field(int, 40),
    ("meta", "meta_per_class"): Field(int, 5),
    ("meta", "period"): Field(int, 1),
    ("train", "epochs"): Field(int, 50),
    ("train", "batch_size"): Field(int, 40),
    ("train", "n_instance"): Field(int, 5),
    ("train", "optimizer"): Field(str, "adam", choices=OPTIMIZERS),
    ("train", "learning_rate"): Field(float, 1e-5),
    ("train", "seed"): Field(int, 0),
    ("train", "eval_every"): Field(int, 0),
    ("eval", "recall_ks"): Field(str, "1,2,4,8"),
    ("eval", "histogram_bins"): Field(int, 50),
}


def _coerce(section: str, key: str, raw: str):
    spec = SCHEMA[(section, key)]
    raw = raw.strip()
    if spec.optional and raw == "":
        return None
    try:
        if spec.type is bool:
            lower = raw.lower()
            if lower in ("true", "1", "yes"):
                return True
            if lower in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        value = spec.type(raw)
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r} as {spec.type.__name__}") from None
    if spec.choices and value not in spec.choices:
        raise ConfigError(f"{section}.{key}: {value!r} not in {spec.choices}")
    return value


def load_config(path=None, overrides: list[str] | None = None) -> dict[tuple[str, str], object]:
    """Defaults, then the INI file, then key=value overrides, all type-checked."""
    values = {sk: spec.default for sk, spec in SCHEMA.items()}
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"cannot read config file {path}")
        for section in parser.sections():
            for key, raw in parser.items(section):
                if (section, key) not in SCHEMA:
                    raise ConfigError(f"unknown key {section}.{key}")
                values[(section, key)] = _coerce(section, key, raw)
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        section, key = dotted.split(".", 1)
        if (section, key) not in SCHEMA:
            raise ConfigError(f"unknown key {section}.{key}")
        values[(section, key)] = _coerce(section, key, raw)
    return values


def write_resolved(values: dict[tuple[str, str], object], path) -> None:
    """Snapshot the fully resolved configuration as reloadable INI."""
    parser = configparser.ConfigParser()
    for (section, key), value in sorted(values.items()):
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, "" if value is None else repr(value) if isinstance(value, float) else str(value))
    with open(path, "w") as fh:
        parser.write(fh)


def recall_ks(values) -> tuple[int, ...]:
    raw = values[("eval", "recall_ks")]
    try:
        ks = tuple(int(x) for x in str(raw).split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"eval.recall_ks: cannot parse {raw!r}") from None
    if not ks or any(k < 1 for k in ks):
        raise ConfigError("eval.recall_ks must be positive integers")
    return ks


def build_train_config(values: dict[tuple[str, str], object]) -> TrainConfig:
    def v(section, key):
        return values[(section, key)]

    try:
        loss = LossParams(
            threshold=v("loss", "threshold"),
            pos_scale=v("loss", "pos_scale"),
            neg_scale=v("loss", "neg_scale"),
            pos_margin=v("loss", "pos_margin"),
            neg_margin=v("loss", "neg_margin"),
            count_mode=v("loss", "count_mode"),
        )
        mining_cfg = MiningConfig(
            mode=v("mining", "mode"),
            tolerance=v("mining", "tolerance"),
            pos_tolerance=v("mining", "pos_tolerance"),
            neg_tolerance=v("mining", "neg_tolerance"),
            adapt_scale=v("mining", "adapt_scale"),
        )
        meta_cfg = MetaConfig(
            lookahead_lr=v("meta", "lookahead_lr"),
            threshold_lr=v("meta", "threshold_lr"),
            fd_step=v("meta", "fd_step"),
            update_mode=v("meta", "update_mode"),
            meta_pass=v("meta", "meta_pass"),
            meta_batch_size=v("meta", "meta_batch_size"),
            meta_per_class=v("meta", "meta_per_class"),
            period=v("meta", "period"),
        )
        return TrainConfig(
            epochs=v("train", "epochs"),
            batch_size=v("train", "batch_size"),
            n_instance=v("train", "n_instance"),
            optimizer=v("train", "optimizer"),
            learning_rate=v("train", "learning_rate"),
            hidden_dim=v("model", "hidden_dim"),
            embedding_dim=v("model", "embedding_dim"),
            norm_floor=v("model", "norm_floor"),
            loss=loss,
            mining=mining_cfg,
            meta=meta_cfg,
            generator_enabled=v("meta", "enabled"),
            seed=v("train", "seed"),
            eval_every=v("train", "eval_every"),
            recall_ks=recall_ks(values),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
