import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fbsim.data import SyntheticConfig, make_federated_dataset
from fbsim.errors import ConfigError, ProtocolError
from fbsim.hypernet import HypernetShape, hypernet_forward, hypernet_vjp, init_hypernet, mix_models
from fbsim.nn import ModelSpec, OptimizerConfig, ParamVector, Segment, build_model, relative_error
from fbsim.orchestrator import simulate
from fbsim.strategies import (
    ClientUpdate,
    ServerState,
    StrategyHyperparams,
    StrategyKind,
    aggregate,
    aggregation_weights,
    bn_float_count,
    comm_footprint,
    evaluation_models,
    init_clients,
    init_server,
    local_train,
    model_contrastive_loss,
    serve,
)

from helpers import small_config

ALL = list(StrategyKind)
DATA = SyntheticConfig(input_dim=6, num_classes=3, num_clients=3, samples_per_client_mean=40, label_groups=3, seed=2)
SPEC = ModelSpec(6, (5,), 3)
SGD = OptimizerConfig("sgd")


def _dataset(scenario="ds2", k=3):
    cfg = SyntheticConfig(**{**DATA.__dict__, "num_clients": k})
    return make_federated_dataset(cfg, scenario)


def _one_round(kind, hp=None, scenario="ds2", k=3, spec=SPEC, epochs=2, batch_size=16, seed=0):
    """Train every client once from a fresh server and aggregate."""
    hp = hp or StrategyHyperparams()
    data = _dataset(scenario, k)
    w0 = build_model(spec, seed)
    server = init_server(kind, hp, w0, k, seed)
    clients = init_clients(kind, w0, data.clients)
    served = [serve(kind, server, i) for i in range(k)]
    v = server.v
    updates = [local_train(kind, hp, c, served[c.client_id], spec, v, epochs, 0.1, batch_size, SGD,
                           np.random.default_rng([seed, c.client_id]), 1) for c in clients]
    before = server.w.copy()
    aggregate(kind, hp, server, updates, [len(c.data) for c in clients], eta=0.1)
    return server, clients, updates, before


def _scalar_update(cid, value, **kw):
    segs = (Segment("w", 0, 1, "weight", (1,)),)
    return ClientUpdate(cid, ParamVector(np.array([float(value)]), segs), **kw)


# -- local training ------------------------------------------------------------------

def test_fedprox_without_penalty_is_fedavg_locally():
    _, _, avg, _ = _one_round(StrategyKind.FEDAVG)
    _, _, prox, _ = _one_round(StrategyKind.FEDPROX, StrategyHyperparams(gamma=0.0))
    assert all(a.w.equal(b.w) for a, b in zip(avg, prox))


def test_scaffold_with_zero_controls_follows_fedavg_in_round_one():
    _, _, avg, _ = _one_round(StrategyKind.FEDAVG)
    _, _, sc, _ = _one_round(StrategyKind.SCAFFOLD)
    assert all(a.w.equal(b.w) for a, b in zip(avg, sc))


def test_moon_loss_is_ln2_when_all_features_agree():
    f = np.array([[0.3, -1.2, 2.0]])
    loss, _ = model_contrastive_loss(f, f, f, tau=1.0)
    assert loss == pytest.approx(math.log(2), abs=1e-12)
    assert loss == pytest.approx(0.693147, abs=1e-6)


def test_moon_literal_negative_is_constant_in_local_features():
    rng = np.random.default_rng(0)
    f, g, p = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    loss, dfeat = model_contrastive_loss(f, g, p, 0.5, "literal")
    eps = 1e-6
    fp = f.copy()
    fp[0, 0] += eps
    fm = f.copy()
    fm[0, 0] -= eps
    fd = (model_contrastive_loss(fp, g, p, 0.5, "literal")[0]
          - model_contrastive_loss(fm, g, p, 0.5, "literal")[0]) / (2 * eps)
    assert dfeat[0, 0] == pytest.approx(fd, abs=1e-8)


def test_feddc_drift_after_single_step_is_the_local_change():
    spec = ModelSpec(6, (), 3)
    data = _dataset("ds1", 1)
    w0 = build_model(spec, 0)
    hp = StrategyHyperparams()
    client = init_clients(StrategyKind.FEDDC, w0, data.clients)[0]
    server = init_server(StrategyKind.FEDDC, hp, w0, 1)
    upd = local_train(StrategyKind.FEDDC, hp, client, server.w, spec, server.v, 1, 0.1, 10_000, SGD,
                      np.random.default_rng(0), 1)
    assert upd.num_steps == 1
    np.testing.assert_array_equal(client.h.values, upd.w.values - w0.values)


def test_step_count_is_epochs_times_batches():
    _, clients, updates, _ = _one_round(StrategyKind.FEDAVG, epochs=3, batch_size=16)
    for c, u in zip(clients, updates):
        assert u.num_steps == 3 * math.ceil(len(c.data) / 16)


def test_moon_remembers_last_local_model():
    _, clients, updates, _ = _one_round(StrategyKind.MOON)
    assert all(c.prev_local.equal(u.w) for c, u in zip(clients, updates))


def test_local_train_rejects_mismatched_spec():
    data = _dataset("ds1", 1)
    w0 = build_model(SPEC, 0)
    client = init_clients(StrategyKind.FEDAVG, w0, data.clients)[0]
    with pytest.raises(ProtocolError):
        local_train(StrategyKind.FEDAVG, StrategyHyperparams(), client, build_model(ModelSpec(6, (4,), 3), 0),
                    SPEC, None, 1, 0.1, 8, SGD, np.random.default_rng(0))


def test_hyperparameter_validation():
    with pytest.raises(ConfigError):
        StrategyHyperparams(tau=0.0)
    with pytest.raises(ConfigError):
        StrategyHyperparams(gamma=-1.0)
    with pytest.raises(ConfigError):
        StrategyKind.parse("fedsgd")


# -- aggregation -----------------------------------------------------------------------

def test_fedavg_weighted_mean_example():
    server = ServerState(w=_scalar_update(0, 0).w)
    aggregate(StrategyKind.FEDAVG, StrategyHyperparams(), server,
              [_scalar_update(0, 0.0), _scalar_update(1, 4.0)], [1, 3])
    assert server.w.values.tolist() == [3.0]
    assert server.round == 2


@given(st.lists(st.integers(1, 10_000), min_size=1, max_size=30))
def test_aggregation_weights_are_an_exact_simplex(sizes):
    alpha = aggregation_weights(sizes)
    assert sum(alpha) == 1 and all(a > 0 for a in alpha)


def test_missing_client_is_a_protocol_error():
    server = ServerState(w=_scalar_update(0, 0).w)
    with pytest.raises(ProtocolError, match="missing \\[1\\]"):
        aggregate(StrategyKind.FEDAVG, StrategyHyperparams(), server, [_scalar_update(0, 1.0)], [1, 1])


def test_fednova_homogeneous_equals_fedavg_exactly():
    ups = [_scalar_update(i, x, num_steps=4) for i, x in enumerate([0.1, 0.7, -0.3])]
    avg = ServerState(w=_scalar_update(0, 0.25).w)
    nova = ServerState(w=_scalar_update(0, 0.25).w)
    aggregate(StrategyKind.FEDAVG, StrategyHyperparams(), avg, ups, [5, 5, 5])
    aggregate(StrategyKind.FEDNOVA, StrategyHyperparams(), nova, ups, [5, 5, 5])
    assert avg.w.equal(nova.w)


def test_fednova_normalizes_deltas():
    ups = [_scalar_update(0, 2.0, num_steps=1), _scalar_update(1, 4.0, num_steps=3)]
    server = ServerState(w=_scalar_update(0, 1.0).w)
    aggregate(StrategyKind.FEDNOVA, StrategyHyperparams(), server, ups, [1, 1])
    tau_eff = 0.5 * 1 + 0.5 * 3
    d = 0.5 * (2.0 - 1.0) / 1 + 0.5 * (4.0 - 1.0) / 3
    assert server.w.values[0] == pytest.approx(1.0 + tau_eff * d, abs=1e-15)


def test_fednova_literal_scales_parameters():
    ups = [_scalar_update(0, 2.0, num_steps=2), _scalar_update(1, 4.0, num_steps=4)]
    server = ServerState(w=_scalar_update(0, 1.0).w)
    aggregate(StrategyKind.FEDNOVA, StrategyHyperparams(fednova_literal=True), server, ups, [1, 1])
    assert server.w.values[0] == pytest.approx(0.5 * 2 / 2 + 0.5 * 4 / 4)


def test_feddc_folds_drift_into_the_average():
    ups = [_scalar_update(i, x) for i, x in enumerate([1.0, 3.0])]
    for u, h in zip(ups, [0.5, -1.0]):
        u.h = u.w.with_values(np.array([h]))
        u.dv = u.w.zeros_like()
    server = ServerState(w=_scalar_update(0, 0).w, v=_scalar_update(0, 0).w)
    aggregate(StrategyKind.FEDDC, StrategyHyperparams(), server, ups, [1, 1])
    assert server.w.values[0] == pytest.approx(0.5 * (1.5 + 2.0))


def test_fedbn_keeps_bn_segments_local_and_server_bn_frozen():
    server, clients, updates, before = _one_round(StrategyKind.FEDBN)
    bn = server.w.bn_mask
    np.testing.assert_array_equal(server.w.values[bn], before.values[bn])
    for c, u in zip(clients, updates):
        for name in ("hidden0.bn.gamma", "hidden0.bn.beta"):
            np.testing.assert_array_equal(c.bn_local[name], u.w[name])
    expected = sum(float(a) * u.w.values[~bn] for a, u in zip(aggregation_weights([len(c.data) for c in clients]),
                                                                 updates))
    np.testing.assert_allclose(server.w.values[~bn], expected, rtol=1e-12)


def test_fedbn_evaluation_models_carry_client_bn():
    server, clients, _, _ = _one_round(StrategyKind.FEDBN)
    models = evaluation_models(StrategyKind.FEDBN, server, clients)
    bn = server.w.bn_mask
    for m, c in zip(models, clients):
        np.testing.assert_array_equal(m.values[bn], c.bn_local.values[bn])
        np.testing.assert_array_equal(m.values[~bn], server.w.values[~bn])


def test_pfedla_single_client_serves_its_own_model():
    hp = StrategyHyperparams()
    server, clients, updates, _ = _one_round(StrategyKind.PFEDLA, hp, k=1)
    alpha = hypernet_forward(server.hypernets[0], server.hypernet_shape)
    assert np.all(alpha == 1.0)
    assert serve(StrategyKind.PFEDLA, server, 0).equal(updates[0].w)


def test_pfedla_hypernet_moves_toward_trained_models():
    hp = StrategyHyperparams(pfedla_hyper_lr=0.5)
    kind = StrategyKind.PFEDLA
    data = _dataset("ds2", 3)
    w0 = build_model(SPEC, 0)
    server = init_server(kind, hp, w0, 3)
    server.client_models = [build_model(SPEC, s) for s in (1, 2, 3)]
    targets = [build_model(SPEC, s) for s in (4, 5, 6)]
    served = [serve(kind, server, i) for i in range(3)]
    ups = [ClientUpdate(i, t) for i, t in enumerate(targets)]
    before = [float(np.sum((s.values - t.values) ** 2)) for s, t in zip(served, targets)]
    old_models = list(server.client_models)
    aggregate(kind, hp, server, ups, [len(c) for c in data.clients], eta=0.1)
    after = [float(np.sum((mix_models(hypernet_forward(hn, server.hypernet_shape), old_models).values
                           - t.values) ** 2)) for hn, t in zip(server.hypernets, targets)]
    assert all(a < b for a, b in zip(after, before))
    assert all(m.equal(t) for m, t in zip(server.client_models, targets))


# -- hypernetwork ------------------------------------------------------------------------

def test_zero_output_layer_gives_uniform_alpha():
    shape = HypernetShape(5, 4)
    alpha = hypernet_forward(init_hypernet(shape, np.random.default_rng(0)), shape)
    np.testing.assert_array_equal(alpha, np.full((5, 4), 0.25))


@given(st.integers(0, 2**32 - 1))
def test_alpha_rows_on_simplex(seed):
    rng = np.random.default_rng(seed)
    shape = HypernetShape(int(rng.integers(1, 7)), int(rng.integers(1, 6)), 3, 4)
    hn = init_hypernet(shape, rng)
    hn.values[:] = rng.normal(scale=5.0, size=len(hn))
    alpha = hypernet_forward(hn, shape)
    assert np.all(alpha >= 0)
    np.testing.assert_allclose(alpha.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_hypernet_chain_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    spec = ModelSpec(3, (4,), 2)
    K = int(rng.integers(1, 4))
    shape = HypernetShape(len(spec.segments), K, 3, 5)
    hn = init_hypernet(shape, rng)
    hn.values[:] = rng.normal(size=len(hn))
    models = [build_model(spec, int(s)) for s in rng.integers(0, 1000, size=K)]
    u = rng.normal(size=spec.num_params)

    def f(values):
        return float(mix_models(hypernet_forward(hn.with_values(values), shape), models).values @ u)

    grad = hypernet_vjp(hn, shape, models, u).values
    eps = 1e-6
    fd = np.empty_like(grad)
    for k in range(len(hn)):
        plus, minus = hn.values.copy(), hn.values.copy()
        plus[k] += eps
        minus[k] -= eps
        fd[k] = (f(plus) - f(minus)) / (2 * eps)
    assert relative_error(grad, fd) < 1e-4
    emb = hn.segment("embedding").slice
    assert relative_error(grad[emb], fd[emb]) < 1e-4


# -- communication footprint ---------------------------------------------------------------

def test_scaffold_uploads_twice_fedavg():
    assert comm_footprint("scaffold", SPEC, 7).up_per_client == 2 * comm_footprint("fedavg", SPEC, 7).up_per_client


def test_fedbn_deficit_is_bn_count():
    n_bn = sum(s.length for s in SPEC.segments if s.kind.startswith("bn_"))
    assert bn_float_count(SPEC) == n_bn == 4 * 5
    assert comm_footprint("fedavg", SPEC, 3).up_per_client - comm_footprint("fedbn", SPEC, 3).up_per_client == n_bn


def test_feddc_uploads_three_vectors_and_fednova_one_scalar_extra():
    n = SPEC.num_params
    assert comm_footprint("feddc", SPEC, 1).up_per_client == 3 * n
    assert comm_footprint("fednova", SPEC, 1).up_per_client == n + 1
    for kind in ("fedavg", "fedprox", "moon", "pfedla"):
        fp = comm_footprint(kind, SPEC, 4)
        assert fp.up_per_client == fp.down_per_client == n
        assert fp.up_total == 4 * n


@pytest.mark.parametrize("kind", ALL)
def test_update_payload_matches_footprint(kind):
    _, _, updates, _ = _one_round(kind)
    assert all(u.upload_floats == comm_footprint(kind, SPEC, 3).up_per_client for u in updates)


# -- degeneracy and invariants ------------------------------------------------------------

@pytest.mark.parametrize("kind", ALL)
def test_single_client_global_equals_local(kind):
    server, clients, updates, _ = _one_round(kind, k=1)
    trained = updates[0].w
    if kind is StrategyKind.FEDDC:
        np.testing.assert_array_equal(server.w.values, trained.values + updates[0].h.values)
    elif kind in (StrategyKind.FEDBN, StrategyKind.PFEDLA):
        assert evaluation_models(kind, server, clients)[0].equal(trained)
    else:
        assert server.w.equal(trained)


def test_scaffold_control_variate_telescopes():
    cfg = small_config("scaffold", "ds2", rounds=4)
    _, sim = simulate(cfg)
    mean_vi = np.mean([c.v.values for c in sim.clients], axis=0)
    scale = max(np.abs(mean_vi).max(), 1.0)
    assert np.max(np.abs(sim.server.v.values - mean_vi)) <= 1e-12 * scale * len(sim.clients)


def test_control_variates_skip_running_stats():
    _, clients, _, _ = _one_round(StrategyKind.SCAFFOLD)
    for c in clients:
        assert np.all(c.v.values[~c.w.trainable_mask] == 0.0)


def test_moon_skips_samples_with_zero_features():
    rng = np.random.default_rng(1)
    f, g, p = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    f0 = f.copy()
    f0[1] = 0.0
    loss, dfeat = model_contrastive_loss(f0, g, p, 1.0)
    keep = [0, 2]
    ref, dref = model_contrastive_loss(f[keep], g[keep], p[keep], 1.0)
    assert loss == pytest.approx(ref)
    np.testing.assert_allclose(dfeat[keep], dref)
    assert np.all(dfeat[1] == 0.0)


def test_moon_dead_extractor_raises():
    from fbsim.errors import DegenerateInputError

    z = np.zeros((2, 3))
    with pytest.raises(DegenerateInputError, match="dead"):
        model_contrastive_loss(z, np.ones((2, 3)), np.ones((2, 3)), 1.0)
