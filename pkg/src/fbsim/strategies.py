"""The eight FL algorithms as local-training and aggregation rules.

``local_train`` follows the single local-training listing shared by the
local-training focused family (FedProx, SCAFFOLD, MOON, FedDC) with each
algorithm switching on its own term; the aggregation focused family
(FedNova, FedBN, pFedLA) and FedAvg train with plain ERM.  ``aggregate``
holds every server-side rule.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .data import ClientDataset
from .errors import ConfigError, DegenerateInputError, NumericError, ProtocolError
from .hypernet import HypernetShape, hypernet_forward, hypernet_vjp, init_hypernet, mix_models
from .nn import (Batch, ModelSpec, Optimizer, OptimizerConfig, ParamVector, backward, bce_loss,
                 cosine_rows, forward)


class StrategyKind(str, enum.Enum):
    FEDAVG = "fedavg"
    FEDPROX = "fedprox"
    SCAFFOLD = "scaffold"
    MOON = "moon"
    FEDDC = "feddc"
    FEDNOVA = "fednova"
    FEDBN = "fedbn"
    PFEDLA = "pfedla"

    @classmethod
    def parse(cls, value: "str | StrategyKind") -> "StrategyKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ConfigError(f"unknown strategy {value!r}; expected one of {[m.value for m in cls]}") from None

    @property
    def uses_control_variates(self) -> bool:
        return self in (StrategyKind.SCAFFOLD, StrategyKind.FEDDC)


@dataclass
class StrategyHyperparams:
    gamma: float = 0.01
    tau: float = 1.0
    mu: float = 0.1
    feddc_penalty_weight: float = 1.0
    pfedla_embed_dim: int = 8
    pfedla_hidden: int = 32
    pfedla_hyper_lr: float | None = None
    # "previous_local": negative pair is (local, previous local) as in MOON;
    # "literal": negative pair is (previous local, global), constant in w_i.
    moon_negative: str = "previous_local"
    # Scale aggregated parameters (not deltas) by 1/U_i.
    fednova_literal: bool = False
    # Study knobs for the reduction identities.
    freeze_control_variates: bool = False
    feddc_fold_drift: bool = True

    def __post_init__(self):
        if self.gamma < 0 or self.mu < 0 or self.feddc_penalty_weight < 0:
            raise ConfigError("gamma, mu and feddc_penalty_weight must be >= 0")
        if not self.tau > 0:
            raise ConfigError("tau must be > 0")
        if self.pfedla_embed_dim < 1 or self.pfedla_hidden < 1:
            raise ConfigError("pFedLA hypernetwork sizes must be >= 1")
        if self.pfedla_hyper_lr is not None and not self.pfedla_hyper_lr > 0:
            raise ConfigError("pfedla_hyper_lr must be > 0")
        if self.moon_negative not in ("previous_local", "literal"):
            raise ConfigError(f"moon_negative must be 'previous_local' or 'literal', got {self.moon_negative!r}")


@dataclass
class ClientState:
    client_id: int
    data: ClientDataset
    w: ParamVector
    v: ParamVector | None = None
    h: ParamVector | None = None
    prev_local: ParamVector | None = None
    bn_local: ParamVector | None = None
    optimizer: Optimizer | None = None


@dataclass
class ServerState:
    w: ParamVector
    v: ParamVector | None = None
    round: int = 1
    hypernet_shape: HypernetShape | None = None
    hypernets: list[ParamVector] = field(default_factory=list)
    client_models: list[ParamVector] = field(default_factory=list)


@dataclass
class ClientUpdate:
    client_id: int
    w: ParamVector
    dv: ParamVector | None = None
    h: ParamVector | None = None
    num_steps: int = 0
    wall_time: float = 0.0
    mean_loss: float = float("nan")
    upload_floats: int = 0


@dataclass
class LocalContext:
    """What the composite local objective needs besides the batch."""

    served: ParamVector | None = None
    drift: ParamVector | None = None
    global_model: ParamVector | None = None
    prev_model: ParamVector | None = None


# -- composite local objective ---------------------------------------------

def model_contrastive_loss(f_local: np.ndarray, f_global: np.ndarray, f_prev: np.ndarray,
                           tau: float, negative: str = "previous_local") -> tuple[float, np.ndarray]:
    """Model-contrastive loss averaged over the batch, and its gradient w.r.t. ``f_local``.

    Per sample: ``-log(exp(s_pos/tau) / (exp(s_pos/tau) + exp(s_neg/tau)))``
    with ``s_pos = cos(f_local, f_global)``.  Samples whose feature vector is
    all zero under any of the three models (every ReLU unit off) have no
    defined cosine and are left out of the average; a batch with no usable
    sample means the feature extractor is dead and raises.
    """
    n = f_local.shape[0]
    usable = ((np.abs(f_local).max(axis=1) > 0) & (np.abs(f_global).max(axis=1) > 0)
              & (np.abs(f_prev).max(axis=1) > 0))
    dfeat = np.zeros_like(f_local)
    m = int(usable.sum())
    if m == 0:
        raise DegenerateInputError(f"all {n} samples have a zero feature vector (dead feature extractor)")
    fl, fg, fp = f_local[usable], f_global[usable], f_prev[usable]
    s_pos, ds_pos = cosine_rows(fl, fg)
    if negative == "previous_local":
        s_neg, ds_neg = cosine_rows(fl, fp)
    else:
        s_neg, ds_neg = cosine_rows(fp, fg)[0], None
    a, b = s_pos / tau, s_neg / tau
    top = np.maximum(a, b)
    lse = top + np.log(np.exp(a - top) + np.exp(b - top))
    p_pos = np.exp(a - lse)
    loss = float(np.mean(lse - a))
    d = ((p_pos - 1.0) / tau)[:, None] * ds_pos
    if ds_neg is not None:
        d += ((1.0 - p_pos) / tau)[:, None] * ds_neg
    dfeat[usable] = d / m
    return loss, dfeat


def local_objective(kind: StrategyKind, hp: StrategyHyperparams, params: ParamVector, spec: ModelSpec,
                    batch: Batch, ctx: LocalContext, update_stats: bool = True) -> tuple[float, ParamVector]:
    """BCE plus the strategy's extra loss term; returns ``(loss, gradient)``.

    The control-variate correction of SCAFFOLD/FedDC is not part of the
    objective and is added by :func:`local_train`.
    """
    trace = forward(params, spec, batch, "train", update_stats)
    loss, dlogits = bce_loss(trace, batch.labels)
    dfeat = None
    if kind is StrategyKind.MOON and hp.mu > 0:
        f_g = forward(ctx.global_model, spec, batch.features, "eval").features
        f_p = forward(ctx.prev_model, spec, batch.features, "eval").features
        lmc, dfeat = model_contrastive_loss(trace.features, f_g, f_p, hp.tau, hp.moon_negative)
        loss += hp.mu * lmc
        dfeat *= hp.mu
    grad = backward(params, spec, trace, dlogits, dfeat)
    if kind is StrategyKind.FEDPROX and hp.gamma > 0:
        diff = np.where(params.trainable_mask, params.values - ctx.served.values, 0.0)
        loss += 0.5 * hp.gamma * float(diff @ diff)
        grad.values += hp.gamma * diff
    elif kind is StrategyKind.FEDDC and hp.feddc_penalty_weight > 0:
        gap = np.where(params.trainable_mask, ctx.drift.values + params.values - ctx.served.values, 0.0)
        loss += hp.feddc_penalty_weight * float(gap @ gap)
        grad.values += 2.0 * hp.feddc_penalty_weight * gap
    return loss, grad


# -- client / server setup --------------------------------------------------

def bn_float_count(spec: ModelSpec) -> int:
    return int(ParamVector.zeros(spec.segments).bn_mask.sum())


def init_clients(kind: StrategyKind, w0: ParamVector, datasets: list[ClientDataset]) -> list[ClientState]:
    clients = []
    for i, data in enumerate(datasets):
        c = ClientState(client_id=i, data=data, w=w0.copy())
        if kind.uses_control_variates:
            c.v = w0.zeros_like()
        if kind is StrategyKind.FEDDC:
            c.h = w0.zeros_like()
        if kind is StrategyKind.MOON:
            c.prev_local = w0.copy()
        if kind is StrategyKind.FEDBN:
            c.bn_local = w0.copy()
        clients.append(c)
    return clients


def init_server(kind: StrategyKind, hp: StrategyHyperparams, w0: ParamVector, num_clients: int,
                seed: int = 0) -> ServerState:
    server = ServerState(w=w0.copy())
    if kind.uses_control_variates:
        server.v = w0.zeros_like()
    if kind is StrategyKind.PFEDLA:
        shape = HypernetShape(len(w0.segments), num_clients, hp.pfedla_embed_dim, hp.pfedla_hidden)
        server.hypernet_shape = shape
        server.hypernets = [
            init_hypernet(shape, np.random.default_rng(np.random.SeedSequence([seed, 7, i])))
            for i in range(num_clients)
        ]
        server.client_models = [w0.copy() for _ in range(num_clients)]
    return server


def personalized_model(server: ServerState, i: int) -> ParamVector:
    alpha = hypernet_forward(server.hypernets[i], server.hypernet_shape)
    return mix_models(alpha, server.client_models)


def serve(kind: StrategyKind, server: ServerState, i: int) -> ParamVector:
    """The model the server sends to client ``i`` this round."""
    if kind is StrategyKind.PFEDLA:
        return personalized_model(server, i)
    return server.w


def download_floats(kind: StrategyKind, num_params: int, bn_count: int) -> int:
    if kind is StrategyKind.FEDBN:
        return num_params - bn_count
    if kind.uses_control_variates:
        return 2 * num_params
    return num_params


def upload_floats(kind: StrategyKind, num_params: int, bn_count: int) -> int:
    if kind is StrategyKind.FEDBN:
        return num_params - bn_count
    if kind is StrategyKind.SCAFFOLD:
        return 2 * num_params
    if kind is StrategyKind.FEDDC:
        return 3 * num_params
    if kind is StrategyKind.FEDNOVA:
        return num_params + 1
    return num_params


@dataclass(frozen=True)
class Footprint:
    up_per_client: int
    down_per_client: int
    num_clients: int

    @property
    def up_total(self) -> int:
        return self.up_per_client * self.num_clients

    @property
    def down_total(self) -> int:
        return self.down_per_client * self.num_clients


def comm_footprint(kind: StrategyKind | str, spec: ModelSpec, num_clients: int) -> Footprint:
    """Floats moved per client per round, derived from the payload layout alone."""
    kind = StrategyKind.parse(kind)
    n, bn = spec.num_params, bn_float_count(spec)
    return Footprint(upload_floats(kind, n, bn), download_floats(kind, n, bn), num_clients)


# -- local training ---------------------------------------------------------

def local_train(kind: StrategyKind, hp: StrategyHyperparams, client: ClientState, served: ParamVector,
                spec: ModelSpec, server_v: ParamVector | None, epochs: int, eta: float, batch_size: int,
                opt_config: OptimizerConfig, rng: np.random.Generator, round_index: int = 0) -> ClientUpdate:
    """Run ``epochs`` passes of mini-batch training on the client's data.

    Mutates ``client`` (its model, control variate, drift, previous-round
    model or BN segments, depending on the strategy) and returns the
    payload it uploads.
    """
    if epochs < 1 or batch_size < 1:
        raise ConfigError("epochs and batch_size must be >= 1")
    if served.segments != spec.segments:
        raise ProtocolError("served model does not match the client model spec")
    start = time.perf_counter()
    w = served.copy()
    if kind is StrategyKind.FEDBN:
        bn = w.bn_mask
        w.values[bn] = client.bn_local.values[bn]
    w_start = w.copy()
    opt = Optimizer(opt_config, len(w))
    client.optimizer = opt
    corrected = kind.uses_control_variates and not hp.freeze_control_variates
    ctx = LocalContext(served=served, drift=client.h, global_model=served, prev_model=client.prev_local)

    X, Y = client.data.features, client.data.labels.astype(np.float64)
    n = X.shape[0]
    steps, loss_sum = 0, 0.0
    # overflow surfaces as a non-finite loss or gradient and is reported as NumericError
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(epochs):
            order = rng.permutation(n)
            for lo in range(0, n, batch_size):
                idx = order[lo:lo + batch_size]
                batch = Batch.__new__(Batch)
                batch.features, batch.labels = X[idx], Y[idx]
                loss, grad = local_objective(kind, hp, w, spec, batch, ctx)
                if not np.isfinite(loss):
                    raise NumericError("non-finite local loss", round=round_index, client=client.client_id,
                                       epoch=epoch, step=steps)
                if corrected:
                    grad.values += server_v.values - client.v.values
                opt.step(w, grad, eta)
                steps += 1
                loss_sum += loss

    if not np.all(np.isfinite(w.values)):
        raise NumericError("non-finite local model", round=round_index, client=client.client_id)
    update = ClientUpdate(client_id=client.client_id, w=w, num_steps=steps, mean_loss=loss_sum / steps)
    mask = w.trainable_mask
    if kind.uses_control_variates:
        if corrected:
            v_new = client.v.values - server_v.values + (served.values - w.values) / (steps * eta)
            v_new = np.where(mask, v_new, 0.0)
            update.dv = w.with_values(v_new - client.v.values)
            client.v = w.with_values(v_new)
        else:
            update.dv = w.zeros_like()
    if kind is StrategyKind.FEDDC:
        client.h = client.h.with_values(client.h.values + np.where(mask, w.values - w_start.values, 0.0))
        update.h = client.h.copy()
    if kind is StrategyKind.MOON:
        client.prev_local = w.copy()
    if kind is StrategyKind.FEDBN:
        client.bn_local = w.copy()
    client.w = w
    update.upload_floats = upload_floats(kind, len(w), int(w.bn_mask.sum()))
    update.wall_time = time.perf_counter() - start
    return update


# -- aggregation ------------------------------------------------------------

def aggregation_weights(sizes) -> list[Fraction]:
    """Exact ``|D_i| / |D|`` weights."""
    total = int(sum(int(s) for s in sizes))
    if total <= 0:
        raise ProtocolError("aggregation needs a positive total sample count")
    return [Fraction(int(s), total) for s in sizes]


def _weighted_sum(coeffs, vectors: list[np.ndarray]) -> np.ndarray:
    out = float(coeffs[0]) * vectors[0]
    for c, v in zip(coeffs[1:], vectors[1:]):
        out += float(c) * v
    return out


def aggregate(kind: StrategyKind, hp: StrategyHyperparams, server: ServerState,
              updates: list[ClientUpdate], sizes, eta: float | None = None) -> ServerState:
    """Fold one round of client updates into the server state (in place)."""
    K = len(sizes)
    ids = sorted(u.client_id for u in updates)
    if ids != list(range(K)):
        missing = sorted(set(range(K)) - set(ids))
        raise ProtocolError(f"expected one update from each of {K} clients; missing {missing}, got {ids}")
    updates = sorted(updates, key=lambda u: u.client_id)
    alpha = aggregation_weights(sizes)
    local = [u.w.values for u in updates]
    w = server.w

    if kind is StrategyKind.FEDDC and hp.feddc_fold_drift:
        new = _weighted_sum(alpha, [u.w.values + u.h.values for u in updates])
    elif kind is StrategyKind.FEDNOVA and hp.fednova_literal:
        new = _weighted_sum([a / u.num_steps for a, u in zip(alpha, updates)], local)
    elif kind is StrategyKind.FEDNOVA:
        # w_prev + tau_eff * sum_i alpha_i (w_i - w_prev) / U_i, regrouped with
        # exact rational coefficients so that homogeneous U_i reduces to FedAvg.
        # BN running statistics are not step-driven and are averaged as in FedAvg.
        tau_eff = sum(a * u.num_steps for a, u in zip(alpha, updates))
        coeffs = [a * tau_eff / u.num_steps for a, u in zip(alpha, updates)]
        new = _weighted_sum(coeffs, local)
        rest = 1 - sum(coeffs)
        if rest != 0:
            new += float(rest) * w.values
        stats = ~w.trainable_mask
        new[stats] = _weighted_sum(alpha, [v[stats] for v in local])
    elif kind is StrategyKind.FEDBN:
        new = w.values.copy()
        keep = ~w.bn_mask
        new[keep] = _weighted_sum(alpha, [v[keep] for v in local])
    else:
        new = _weighted_sum(alpha, local)

    if kind is StrategyKind.PFEDLA:
        lr = hp.pfedla_hyper_lr if hp.pfedla_hyper_lr is not None else eta
        if lr is None:
            raise ConfigError("pFedLA needs pfedla_hyper_lr or eta")
        shape = server.hypernet_shape
        for u in updates:
            i = u.client_id
            hn = server.hypernets[i]
            served = mix_models(hypernet_forward(hn, shape), server.client_models)
            # descend 0.5 * ||w_i* - w_i||^2: upstream gradient is (served - trained)
            grad = hypernet_vjp(hn, shape, server.client_models, served.values - u.w.values)
            server.hypernets[i] = hn.with_values(hn.values - lr * grad.values)
        server.client_models = [u.w.copy() for u in updates]

    server.w = w.with_values(new)
    if kind.uses_control_variates:
        server.v = server.v.with_values(server.v.values + sum(u.dv.values for u in updates) / K)
    server.round += 1
    return server


def evaluation_models(kind: StrategyKind, server: ServerState, clients: list[ClientState]) -> list[ParamVector]:
    """Models whose test F1 is reported (averaged when more than one)."""
    if kind is StrategyKind.PFEDLA:
        return [personalized_model(server, i) for i in range(len(server.hypernets))]
    if kind is StrategyKind.FEDBN:
        models = []
        bn = server.w.bn_mask
        for c in clients:
            m = server.w.copy()
            m.values[bn] = c.bn_local.values[bn]
            models.append(m)
        return models
    return [server.w]
