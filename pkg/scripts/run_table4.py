"""Contrastive-only pretraining per sampling strategy, then frozen-embedding metrics."""

from _common import parse, report, spec

from contrafocal.harness import CONTRASTIVE_METHODS, run_pretrain_eval

if __name__ == "__main__":
    args = parse(__doc__, repetitions=5)
    report(run_pretrain_eval, spec(args, methods=list(CONTRASTIVE_METHODS)))
