"""Micro-F1 at a fixed round as a function of the number of local epochs.

    python scripts/sensitivity.py --epochs 1 2 3 5 --at-round 5
"""

import argparse

import numpy as np

from fbsim.experiments import micro_f1_at_round


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--strategy", default="fedavg")
    ap.add_argument("--scenario", default="ds1")
    ap.add_argument("--epochs", type=int, nargs="+", default=[1, 3])
    ap.add_argument("--at-round", type=int, default=5)
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args()

    for e in args.epochs:
        scores = micro_f1_at_round(args.strategy, args.scenario, range(args.seeds), args.at_round, local_epochs=e)
        print(f"E={e}: median {np.median(scores):6.2f}  scores {np.round(scores, 2).tolist()}")


if __name__ == "__main__":
    main()
