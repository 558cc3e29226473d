"""Training-set size sweep with the test split held fixed.

The default cohort of 5712 patients gives a training side of 3998, so the
largest size uses (almost) all of it.
"""

from _common import parse, report, spec

from contrafocal.harness import TABLE2_TRAIN_SIZES, run_experiment

if __name__ == "__main__":
    args = parse(__doc__, repetitions=7)
    if args.n_patients == 5000:
        args.n_patients = 5712
    report(run_experiment, spec(args, axis="train_size", values=list(TABLE2_TRAIN_SIZES)))
