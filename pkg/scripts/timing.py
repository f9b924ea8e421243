"""Median local-training wall time per client and the ordering checks.

    python scripts/timing.py --rounds 8
"""

import argparse

from fbsim.experiments import ALL_STRATEGIES, local_time_profile, time_ordering_checks


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--rounds", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--tol", type=float, default=0.10, help="relative tolerance for '~'")
    args = ap.parse_args()

    t = local_time_profile(ALL_STRATEGIES, rounds=args.rounds, seed=args.seed)
    for s, ms in sorted(t.items(), key=lambda kv: -kv[1]):
        print(f"{s:9s} {ms:7.2f} ms  ({ms / t['fedavg']:.2f}x fedavg)")
    for desc, ok in time_ordering_checks(t, tol=args.tol):
        print(f"{'ok  ' if ok else 'FAIL'} {desc}")


if __name__ == "__main__":
    main()
