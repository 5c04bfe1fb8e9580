"""Command-line front end.

Subcommands: gen-data, train, eval, mine-sim, sweep. Every run writes its
resolved config snapshot next to its outputs; metrics are line-delimited
JSON with no embedded timestamps (wall-clock info goes to run_meta.json), so
identical command + seed reproduces byte-identical logs.

Exit codes: 0 ok, 1 usage or config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import data, mining, model, trainer
from .evaluation import evaluate, histogram_to_csv


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _out_dir(args, subcommand: str) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        out = Path(os.environ.get("PAIRMINE_OUT", "runs")) / subcommand
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_dataset(values) -> data.LabeledDataset:
    if values[("data", "source")] == "csv":
        path = values[("data", "path")]
        if not path:
            raise cfgmod.ConfigError("data.path is required when data.source = csv")
        return data.load_features_csv(path)
    return data.gen_gaussian_clusters(
        n_classes=values[("data", "classes")],
        per_class=values[("data", "per_class")],
        dim=values[("data", "dim")],
        spread=values[("data", "spread")],
        seed=values[("data", "seed")],
        radius=values[("data", "radius")],
    )


def _write_run_meta(out: Path, argv) -> None:
    meta = {"started_at": time.strftime("%Y-%m-%dT%H:%M:%S"), "argv": list(argv)}
    (out / "run_meta.json").write_text(json.dumps(meta) + "\n")


def cmd_gen_data(args, argv) -> int:
    values = cfgmod.load_config(args.config, args.set)
    out = _out_dir(args, "gen-data")
    dataset = _load_dataset(values)
    data.save_features_csv(dataset, out / "dataset.csv")
    cfgmod.write_resolved(values, out / "resolved_config.ini")
    _write_run_meta(out, argv)
    print(json.dumps({"dataset": str(out / "dataset.csv"), "samples": len(dataset),
                      "classes": dataset.num_classes, "dim": dataset.dim}, sort_keys=True))
    return 0


def _run_training(values, out: Path):
    dataset = _load_dataset(values)
    frac = values[("data", "test_fraction")]
    if 0.0 < frac < 1.0:
        train_ds, test_ds = data.split_dataset(dataset, frac, seed=values[("data", "seed")])
    else:
        train_ds, test_ds = dataset, None
    tc = cfgmod.build_train_config(values)
    tr = trainer.Trainer(tc, train_ds, eval_dataset=test_ds)
    tr.run()
    tr.log.write(out / "metrics.jsonl")
    trainer.checkpoint(tr.net, tr.threshold, out / "checkpoint.txt")

    eval_ds = test_ds if test_ds is not None else train_ds
    emb = model.forward(tr.net, eval_ds.features)
    ks = tuple(k for k in tc.recall_ks if k < len(eval_ds))
    report = evaluate(emb, eval_ds.labels, ks=ks, seed=tc.seed,
                      bins=values[("eval", "histogram_bins")])
    (out / "eval.json").write_text(report.to_json() + "\n")
    histogram_to_csv(report.histogram, out / "histogram.csv")
    return tr, report


def cmd_train(args, argv) -> int:
    values = cfgmod.load_config(args.config, args.set)
    out = _out_dir(args, "train")
    tr, report = _run_training(values, out)
    cfgmod.write_resolved(values, out / "resolved_config.ini")
    _write_run_meta(out, argv)
    summary = {
        "iterations": tr.iteration,
        "final_threshold": tr.threshold,
        "recall_at": {str(k): v for k, v in sorted(report.recall_at.items())},
        "nmi": report.nmi,
    }
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_eval(args, argv) -> int:
    values = cfgmod.load_config(args.config, args.set)
    out = _out_dir(args, "eval")
    net, threshold = trainer.restore(args.checkpoint)
    dataset = _load_dataset(values)
    emb = model.forward(net, dataset.features)
    ks = tuple(k for k in cfgmod.recall_ks(values) if k < len(dataset))
    report = evaluate(emb, dataset.labels, ks=ks, seed=values[("train", "seed")],
                      bins=values[("eval", "histogram_bins")])
    (out / "eval.json").write_text(report.to_json() + "\n")
    histogram_to_csv(report.histogram, out / "histogram.csv")
    cfgmod.write_resolved(values, out / "resolved_config.ini")
    _write_run_meta(out, argv)
    print(json.dumps({"threshold": threshold,
                      "recall_at": {str(k): v for k, v in sorted(report.recall_at.items())},
                      "nmi": report.nmi}, sort_keys=True))
    return 0


def _batch_embeddings(values, args):
    """Yield (inputs-as-unit-embeddings, labels) batches for mine-sim."""
    if args.embeddings:
        dataset = data.load_features_csv(args.embeddings)
    else:
        dataset = _load_dataset(values)
    feats = dataset.features
    norms = np.linalg.norm(feats, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("zero feature row cannot be normalized into an embedding")
    unit = feats / norms[:, None]
    unit_ds = data.LabeledDataset(features=unit, labels=dataset.labels)
    rng = np.random.default_rng(values[("train", "seed")])
    b = values[("train", "batch_size")]
    k = values[("train", "n_instance")]
    for _ in range(args.batches):
        batch = data.pk_sample(unit_ds, b, k, rng)
        yield unit_ds.features[batch.indices], batch.labels


def cmd_mine_sim(args, argv) -> int:
    values = cfgmod.load_config(args.config, args.set)
    out = _out_dir(args, "mine-sim")
    mc = cfgmod.build_train_config(values).mining
    modes = list(mining.MINING_MODES) if args.mode == "all" else [args.mode]
    total_pos, _ = mining.pair_counts(values[("train", "batch_size")], values[("train", "n_instance")])

    lines = []
    for idx, (emb, labels) in enumerate(_batch_embeddings(values, args)):
        sim = mining.similarity_matrix(emb, labels)
        doc = {"batch": idx, "counts": {}}
        for mode in modes:
            pairs, decision = mining.mine(sim, dataclasses.replace(mc, mode=mode), total_pos)
            doc["counts"][mode] = {"n_pos": pairs.n_pos, "n_neg": pairs.n_neg,
                                   "anchors_used": pairs.anchors_used}
            if decision is not None:
                doc["decision"] = dataclasses.asdict(decision)
        line = json.dumps(doc, sort_keys=True)
        print(line)
        lines.append(line)
    (out / "mine_sim.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""))
    cfgmod.write_resolved(values, out / "resolved_config.ini")
    _write_run_meta(out, argv)
    return 0


def _parse_grid(items: list[str]) -> list[tuple[str, list[str]]]:
    grid = []
    for item in items:
        if "=" not in item:
            raise UsageError(f"--grid must look like section.key=v1,v2 got {item!r}")
        dotted, raw = item.split("=", 1)
        vals = [v for v in raw.split(",") if v != ""]
        if not vals:
            raise UsageError(f"--grid {dotted} has no values")
        grid.append((dotted, vals))
    return grid


def cmd_sweep(args, argv) -> int:
    base_overrides = list(args.set or [])
    grid = _parse_grid(args.grid or [])
    if not grid:
        raise UsageError("sweep needs at least one --grid key=v1,v2")
    out = _out_dir(args, "sweep")

    keys = [k for k, _ in grid]
    rows = []
    for cell_idx, combo in enumerate(itertools.product(*[vals for _, vals in grid])):
        overrides = base_overrides + [f"{k}={v}" for k, v in zip(keys, combo)]
        values = cfgmod.load_config(args.config, overrides)
        cell_dir = out / f"cell_{cell_idx:03d}"
        cell_dir.mkdir(parents=True, exist_ok=True)
        tr, report = _run_training(values, cell_dir)
        cfgmod.write_resolved(values, cell_dir / "resolved_config.ini")
        row = {k: v for k, v in zip(keys, combo)}
        row.update({
            "cell": cell_idx,
            "final_loss": tr.log.iterations[-1].loss if tr.log.iterations else "",
            "recall@1": report.recall_at.get(1, ""),
            "nmi": report.nmi,
            "final_threshold": tr.threshold,
        })
        rows.append(row)

    header = keys + ["cell", "final_loss", "recall@1", "nmi", "final_threshold"]
    with open(out / "sweep.csv", "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(str(row[h]) for h in header) + "\n")
    _write_run_meta(out, argv)
    print(json.dumps({"cells": len(rows), "summary": str(out / "sweep.csv")}, sort_keys=True))
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="pairmine", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("-c", "--config", default=None, help="INI config file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config value (repeatable)")
        p.add_argument("-o", "--out", default=None,
                       help="output directory (default: $PAIRMINE_OUT/<subcommand>)")

    common(sub.add_parser("gen-data", help="write a synthetic feature CSV"))
    common(sub.add_parser("train", help="train and evaluate an embedding net"))

    p_eval = sub.add_parser("eval", help="score a checkpoint against a dataset")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)

    p_mine = sub.add_parser("mine-sim", help="dump mined-pair statistics per batch")
    common(p_mine)
    p_mine.add_argument("--mode", default="all", choices=("all",) + mining.MINING_MODES)
    p_mine.add_argument("--batches", type=int, default=1)
    p_mine.add_argument("--embeddings", default=None,
                        help="CSV of embeddings+labels (rows are L2-normalized)")

    p_sweep = sub.add_parser("sweep", help="grid of training runs, one summary row per cell")
    common(p_sweep)
    p_sweep.add_argument("--grid", action="append", default=[], metavar="SECTION.KEY=V1,V2")

    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "mine-sim": cmd_mine_sim,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](args, argv)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 1
    except cfgmod.ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - single-line runtime diagnostics
        print(f"error: runtime: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
