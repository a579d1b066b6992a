"""Sparsity control on the toy encoder: prune_train at one or more targets, then report.

    python3 scripts/run_pruning.py --targets 0,0.3,0.5 --steps 2000
"""

import argparse
import time

import numpy as np

from svforge import frontend as fe
from svforge.encoder import ConformerConfig, ConformerEncoder
from svforge.pipeline import feature_batches
from svforge.pruning import PruneConfig, prune_train, pruning_report


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--targets", default="0.5")
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--warmup", type=int, default=500)
    ap.add_argument("--lr-lambda", type=float, default=PruneConfig.lr_lambda)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    corpus = fe.synth_dataset(8, 4, seed=args.seed)
    batches = feature_batches(corpus.utterances, 100, 4, seed=args.seed)
    for target in (float(t) for t in args.targets.split(",")):
        teacher = ConformerEncoder(ConformerConfig(), np.random.default_rng(args.seed))
        teacher.eval()
        cfg = PruneConfig(target=target, steps=args.steps, warmup_steps=args.warmup, lr_lambda=args.lr_lambda)
        t0 = time.perf_counter()
        res = prune_train(teacher, teacher.clone(), batches, cfg, np.random.default_rng(args.seed + 1))
        h = res.history[-1]
        print(f"== target {target}: {time.perf_counter() - t0:.0f}s, achieved {res.sparsity:.4f}, "
              f"expected {h['expected_sparsity']:.4f}")
        print(pruning_report(res.student, res.pruned))


if __name__ == "__main__":
    main()
