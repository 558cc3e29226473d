"""Command line entry point: ``contrafocal <verb> [--config PATH] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import encoder, harness, metrics
from .cohort import generate_cohort, load_cohort, save_cohort
from .trainer import TrainedModel, embed_records, predict, train

log = logging.getLogger("contrafocal")


def _spec(args) -> harness.ExperimentSpec:
    spec = harness.load_config(args.config) if args.config else harness.ExperimentSpec()
    if args.seed is not None:
        spec.seed = args.seed
        spec.cohort = replace(spec.cohort, seed=args.seed)
    spec.out = args.out
    return spec


def _records(args, spec):
    if getattr(args, "data", None):
        return load_cohort(args.data)
    return generate_cohort(spec.cohort)


def cmd_generate(args) -> int:
    spec = _spec(args)
    records = generate_cohort(spec.cohort)
    path = Path(args.out) / "cohort.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_cohort(records, path, seed=spec.cohort.seed)
    n_pos = sum(r.label for r in records)
    print(f"wrote {len(records)} records ({n_pos} positive) to {path}")
    return 0


def cmd_train(args) -> int:
    spec = _spec(args)
    records = _records(args, spec)
    cfg = spec.train if args.seed is None else replace(spec.train, seed=args.seed)
    model = train(records, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    encoder.save_checkpoint(model.params, out / "checkpoint.txt", model.channel_mean)
    model.write_trace(out / "trace.csv")
    metrics.export_embeddings(out / "embeddings.csv", model.ids, model.labels, model.embeddings)
    print(f"trained on {len(records)} records; final epoch loss {model.epoch_losses()[-1]:.5f}")
    print(f"checkpoint, trace and embeddings written to {out}")
    return 0


def cmd_evaluate(args) -> int:
    params, channel_mean = encoder.load_checkpoint(args.checkpoint)
    records = load_cohort(args.data)
    labels = np.array([r.label for r in records])
    model = TrainedModel(params, channel_mean, [], np.empty((0, params.D)), np.empty(0), np.empty(0))
    probs = predict(model, records)
    report = metrics.classification_report(probs, labels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(f"metric,value\nauroc,{report.auroc!r}\nauprc,{report.auprc!r}\n", encoding="utf-8")
    metrics.export_embeddings(out / "embeddings.csv", [r.id for r in records], labels, embed_records(model, records))
    print(f"AUROC {report.auroc:.4f}  AUPRC {report.auprc:.4f}")
    return 0


def _grid(runner, args) -> int:
    spec = _spec(args)
    t0 = time.perf_counter()
    report = runner(spec)
    print(report.to_table(), end="")
    print(f"[{len(report.runs)} runs in {time.perf_counter() - t0:.1f}s; reports in {spec.out}]")
    return 0


def cmd_grid(args) -> int:
    return _grid(harness.run_experiment, args)


def cmd_sweep(args) -> int:
    return _grid(harness.run_sweep, args)


def cmd_pretrain_eval(args) -> int:
    return _grid(harness.run_pretrain_eval, args)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="contrafocal", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    def verb(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="key = value config file ([cohort], [train], [experiment])")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--out", default="out", help="output directory")
        p.set_defaults(fn=fn)
        return p

    verb("generate", cmd_generate, "write a synthetic cohort file")
    p = verb("train", cmd_train, "train one model on a cohort")
    p.add_argument("--data", help="cohort file (generated from the config when omitted)")
    p = verb("evaluate", cmd_evaluate, "score a checkpoint on a cohort")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    verb("grid", cmd_grid, "method x axis grid with held-out evaluation")
    verb("sweep", cmd_sweep, "k / alpha / tau sweep for the contrastive methods")
    verb("pretrain-eval", cmd_pretrain_eval, "contrastive-only pretraining + embedding metrics")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
