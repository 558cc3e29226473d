"""Overall comparison of CE, FL and the three contrastive variants."""

from _common import parse, report, spec

from contrafocal.harness import run_experiment

if __name__ == "__main__":
    args = parse(__doc__, repetitions=7)
    report(run_experiment, spec(args))
