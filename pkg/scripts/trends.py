"""Final micro-F1 per strategy and scenario, averaged over seeds.

    python scripts/trends.py --scenarios ds1 ds3 --seeds 5 --rounds 20
"""

import argparse

from fbsim.experiments import ALL_STRATEGIES, trend


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--scenarios", nargs="+", default=["ds1", "ds2", "ds3"])
    ap.add_argument("--strategies", nargs="+", default=list(ALL_STRATEGIES))
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--rounds", type=int, default=20)
    ap.add_argument("--clients", type=int, default=7)
    args = ap.parse_args()

    for scenario in args.scenarios:
        result = trend(args.strategies, scenario, range(args.seeds), rounds=args.rounds, num_clients=args.clients)
        print(f"{scenario}  (spread {result.spread:.2f})")
        for strategy, mean, std in sorted(result.rows(), key=lambda r: -r[1]):
            print(f"  {strategy:9s} {mean:6.2f} +- {std:.2f}")


if __name__ == "__main__":
    main()
