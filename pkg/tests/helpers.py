"""Shared builders for the test suite."""

from __future__ import annotations

import dataclasses

import numpy as np

from fbsim.config import ExperimentConfig, ModelConfig
from fbsim.data import SyntheticConfig
from fbsim.nn import Batch, ModelSpec, build_model
from fbsim.strategies import LocalContext, StrategyHyperparams, StrategyKind, local_objective


def random_instance(seed: int, n: int | None = None):
    """A random small model (with perturbed BN state) and a random batch."""
    rng = np.random.default_rng(seed)
    d = int(rng.integers(2, 6))
    P = int(rng.integers(1, 4))
    hidden = tuple(int(h) for h in rng.integers(2, 6, size=int(rng.integers(0, 3))))
    spec = ModelSpec(d, hidden, P, use_batch_norm=bool(rng.integers(2)))
    params = perturbed(build_model(spec, seed), rng)
    n = int(rng.integers(3, 9)) if n is None else n
    batch = Batch(rng.normal(size=(n, d)), rng.integers(0, 2, size=(n, P)))
    return spec, params, batch, rng


def perturbed(params, rng, scale: float = 0.3):
    """Copy of ``params`` with noise on trainable entries and positive running variances."""
    out = params.copy()
    mask = out.trainable_mask
    out.values[mask] += scale * rng.normal(size=int(mask.sum()))
    for seg in out.segments:
        if seg.kind == "bn_running_mean":
            out.values[seg.slice] = rng.normal(size=seg.length)
        elif seg.kind == "bn_running_var":
            out.values[seg.slice] = rng.uniform(0.5, 2.0, size=seg.length)
    return out


def composite_context(kind: StrategyKind, params, rng) -> LocalContext:
    return LocalContext(
        served=perturbed(params, rng),
        drift=params.with_values(0.1 * rng.normal(size=len(params)) * params.trainable_mask),
        global_model=perturbed(params, rng),
        prev_model=perturbed(params, rng),
    )


def objective_pair(kind: StrategyKind, hp: StrategyHyperparams, params, spec, batch, ctx):
    """(analytic gradient, loss_fn for the finite-difference oracle) without touching ``params``."""
    _, grad = local_objective(kind, hp, params.copy(), spec, batch, ctx, update_stats=False)

    def loss_fn(p, s, b):
        return local_objective(kind, hp, p, s, b, ctx, update_stats=False)[0]

    return grad, loss_fn


def small_config(strategy: str = "fedavg", scenario: str = "ds1", **overrides) -> ExperimentConfig:
    """Fast experiment: 3 clients, 3 rounds, a tiny network and pool."""
    data = SyntheticConfig(input_dim=8, num_classes=4, samples_per_client_mean=60, label_groups=2)
    base = dict(strategy=strategy, scenario=scenario, rounds=3, local_epochs=1, num_clients=3,
                batch_size=16, eta=0.1, seed=3, timing="off",
                model=ModelConfig(hidden_dims=(8,)), data=data)
    hparams = overrides.pop("hparams", None)
    base.update(overrides)
    cfg = ExperimentConfig(**base)
    if hparams:
        cfg.hparams = dataclasses.replace(cfg.hparams, **hparams)
    return cfg


ACCEPTANCE_LINES: list[str] = []


def report_acceptance(number: int, name: str, passed: bool, detail: str) -> None:
    line = f"ACCEPTANCE {number} {name}: {'PASS' if passed else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
