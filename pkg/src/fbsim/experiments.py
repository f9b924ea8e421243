"""Multi-run experiment drivers shared by the acceptance suite and scripts/.

Every driver runs in memory (no run directories) and single-threaded, so
results depend only on the configuration and seeds.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig
from .orchestrator import build_simulation, run_round, simulate
from .strategies import StrategyKind

ALL_STRATEGIES = tuple(k.value for k in StrategyKind)


def experiment(strategy: str, scenario: str, seed: int, **overrides) -> ExperimentConfig:
    return ExperimentConfig(strategy=strategy, scenario=scenario, seed=seed, timing="off", **overrides)


def final_micro_f1(strategy: str, scenario: str, seeds, **overrides) -> list[float]:
    """Last-round micro-F1 for each seed."""
    return [simulate(experiment(strategy, scenario, s, **overrides))[0][-1].f1_micro for s in seeds]


def micro_f1_at_round(strategy: str, scenario: str, seeds, at_round: int, **overrides) -> list[float]:
    overrides = {**overrides, "rounds": at_round}
    return [simulate(experiment(strategy, scenario, s, **overrides))[0][at_round - 1].f1_micro for s in seeds]


@dataclass
class TrendResult:
    scenario: str
    scores: dict[str, list[float]]

    def mean(self, strategy: str) -> float:
        return float(np.mean(self.scores[strategy]))

    @property
    def spread(self) -> float:
        means = [self.mean(s) for s in self.scores]
        return max(means) - min(means)

    def rows(self) -> list[tuple[str, float, float]]:
        return [(s, self.mean(s), float(np.std(v))) for s, v in self.scores.items()]


def trend(strategies, scenario: str, seeds, **overrides) -> TrendResult:
    return TrendResult(scenario, {s: final_micro_f1(s, scenario, seeds, **overrides) for s in strategies})


def local_time_profile(strategies=ALL_STRATEGIES, rounds: int = 8, seed: int = 0, warmup: int = 1,
                       **overrides) -> dict[str, float]:
    """Median (over rounds) of the mean per-client local-training time in ms.

    Strategies advance round by round in lockstep so that slow drifts in
    machine load hit all of them alike; the first ``warmup`` rounds are
    dropped.
    """
    sims = {}
    for s in strategies:
        cfg = dataclasses.replace(experiment(s, "ds1", seed, rounds=rounds, **overrides), timing="wall")
        sims[s] = build_simulation(cfg)
    per_round = {s: [] for s in strategies}
    for r in range(1, rounds + 1):
        for s in strategies:
            rec = run_round(sims[s], r)
            if r > warmup:
                per_round[s].append(float(np.mean(rec.wall_ms_per_client)))
    return {s: float(np.median(v)) for s, v in per_round.items()}


def approx_equal(a: float, b: float, tol: float) -> bool:
    return abs(a - b) <= tol * min(a, b)


def time_ordering_checks(t: dict[str, float], tol: float = 0.10, min_ratio: float = 1.2) -> list[tuple[str, bool]]:
    """MOON > SCAFFOLD ~ FedDC > FedProx > FedAvg ~ FedNova ~ FedBN ~ pFedLA.

    ``a ~ b`` means the two medians differ by at most ``tol`` relative to the
    smaller one; ``>`` is a strict comparison of medians (for a group, of its
    extreme member).
    """
    cv = ("scaffold", "feddc")
    plain = ("fedavg", "fednova", "fedbn", "pfedla")
    checks = [
        ("moon > max(scaffold, feddc)", t["moon"] > max(t[s] for s in cv)),
        ("scaffold ~ feddc", approx_equal(t["scaffold"], t["feddc"], tol)),
        ("min(scaffold, feddc) > fedprox", min(t[s] for s in cv) > t["fedprox"]),
        ("fedprox > max(fedavg, fednova, fedbn, pfedla)", t["fedprox"] > max(t[s] for s in plain)),
    ]
    for i, a in enumerate(plain):
        for b in plain[i + 1:]:
            checks.append((f"{a} ~ {b}", approx_equal(t[a], t[b], tol)))
    checks.append((f"moon / fedavg > {min_ratio}", t["moon"] / t["fedavg"] > min_ratio))
    return checks
