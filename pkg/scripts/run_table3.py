"""Positive-rate sweep on the training side (1% to 20%), test split untouched."""

from _common import parse, report, spec

from contrafocal.harness import TABLE3_IMBALANCE, run_experiment

if __name__ == "__main__":
    args = parse(__doc__, repetitions=5)
    report(run_experiment, spec(args, axis="imbalance", values=list(TABLE3_IMBALANCE)))
