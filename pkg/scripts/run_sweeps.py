"""k, alpha and tau sweeps for the three contrastive variants, one at a time."""

from pathlib import Path

from _common import parse, report, spec

from contrafocal.harness import CONTRASTIVE_METHODS, SWEEP_VALUES, run_sweep

if __name__ == "__main__":
    args = parse(__doc__, repetitions=3)
    base_out = args.out
    for axis, values in SWEEP_VALUES.items():
        if base_out is not None:
            args.out = str(Path(base_out) / axis.value)
        report(run_sweep, spec(args, axis=axis, values=list(values), methods=list(CONTRASTIVE_METHODS)))
