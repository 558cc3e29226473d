"""Shared argument handling for the experiment scripts."""

import argparse
import logging
import time

from contrafocal.cohort import CohortSpec
from contrafocal.harness import ExperimentSpec


def parse(description, repetitions):
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--out", default=None, help="directory for report files")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--repetitions", type=int, default=repetitions)
    p.add_argument("--n-patients", type=int, default=5000)
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    return args


def spec(args, **kw):
    return ExperimentSpec(
        cohort=CohortSpec(n_patients=args.n_patients),
        repetitions=args.repetitions,
        seed=args.seed,
        out=args.out,
        **kw,
    )


def report(runner, s):
    start = time.perf_counter()
    result = runner(s)
    print(result.to_table(), end="")
    print(f"[{len(result.runs)} runs, {time.perf_counter() - start:.0f}s]")
    return result
