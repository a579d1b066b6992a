"""Desk-scale end-to-end run: weighted-head baseline, Adapter+MFA three stages, t=0.5 pruning.

    python3 scripts/run_pipeline.py [--config run.cfg] [--set key=value ...] [--out DIR]
"""

import argparse
import logging

from svforge import config as C
from svforge.pipeline import run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[])
    ap.add_argument("--out")
    ap.add_argument("--no-baseline", action="store_true")
    ap.add_argument("--no-prune", action="store_true")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    cfg = C.load(args.config) if args.config else C.RunConfig()
    cfg = C.apply_overrides(cfg, [C.parse_set(s) for s in args.set])
    res = run_experiment(cfg, args.out, baseline=not args.no_baseline, prune=not args.no_prune)

    print(f"\n{'system':<22}{'row':<14}{'EER(%)':>8}{'mDCF':>9}")
    for name, r in res["systems"].items():
        for row, m in r.rows.items():
            print(f"{name:<22}{row:<14}{100 * m['eer']:>8.2f}{m['mindcf']:>9.4f}")
    if res["prune"] is not None:
        print("\n" + res["prune"].report, end="")
    print(f"\ntotal {res['timings']['total']:.0f}s")


if __name__ == "__main__":
    main()
