"""Synthetic multi-label data and non-IID client partitioning.

Three decentralization regimes are produced from one labeled pool:

* ``DS1_IID``: uniform random split, equal client sizes.
* ``DS2_LABEL_SKEW``: per-class Dirichlet shares plus power-law client sizes.
* ``DS3_LABEL_AND_CONCEPT_SHIFT``: DS2 plus a per-client affine feature
  transform (covariate shift).  The shared test split is never transformed.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .container import MAGIC, Reader, Writer, atomic_write, read_magic
from .errors import ConfigError, ContainerError

TEST_CLIENT_ID = 2**64 - 1
MAX_ATTEMPTS = 10


class ScenarioKind(str, enum.Enum):
    DS1_IID = "ds1"
    DS2_LABEL_SKEW = "ds2"
    DS3_LABEL_AND_CONCEPT_SHIFT = "ds3"

    @classmethod
    def parse(cls, value: "str | ScenarioKind") -> "ScenarioKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        for member in cls:
            if key in (member.value, member.name.lower()):
                return member
        raise ConfigError(f"unknown scenario {value!r}; expected one of {[m.value for m in cls]}")


@dataclass
class SyntheticConfig:
    input_dim: int = 32
    num_classes: int = 8
    num_clients: int = 7
    samples_per_client_mean: int = 500
    quantity_skew_exponent: float = 1.0
    dirichlet_beta: float = 0.1
    concept_shift_strength: float = 0.5
    label_noise_rate: float = 0.0
    feature_noise: float = 1.0
    label_groups: int = 4
    in_group_label_prob: float = 0.5
    extra_label_prob: float = 0.05
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1 or self.input_dim < 1 or self.num_classes < 1 or self.samples_per_client_mean < 1:
            raise ConfigError("num_clients, input_dim, num_classes and samples_per_client_mean must be >= 1")
        if not self.dirichlet_beta > 0:
            raise ConfigError("dirichlet_beta must be > 0")
        if self.quantity_skew_exponent < 0:
            raise ConfigError("quantity_skew_exponent must be >= 0")
        if not 0 <= self.label_noise_rate < 0.5:
            raise ConfigError("label_noise_rate must lie in [0, 0.5)")
        if self.concept_shift_strength < 0 or self.feature_noise < 0:
            raise ConfigError("concept_shift_strength and feature_noise must be >= 0")
        if not (0 <= self.extra_label_prob < 1 and 0 <= self.in_group_label_prob < 1):
            raise ConfigError("label co-occurrence probabilities must lie in [0, 1)")
        if not 1 <= self.label_groups <= self.num_classes:
            raise ConfigError("label_groups must lie in [1, num_classes]")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in (0, 1)")


@dataclass
class SamplePool:
    train_features: np.ndarray
    train_labels: np.ndarray
    train_primary: np.ndarray
    test_features: np.ndarray
    test_labels: np.ndarray
    prototypes: np.ndarray

    @property
    def num_train(self) -> int:
        return self.train_features.shape[0]


@dataclass
class ClientDataset:
    client_id: int
    features: np.ndarray
    labels: np.ndarray  # uint8, n x P
    shift_scale: np.ndarray
    shift_offset: np.ndarray
    shift_applied: bool = False
    scenario: str = ""
    seed: int = 0

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def shift_magnitude(self) -> float:
        return float(max(np.max(np.abs(self.shift_scale - 1.0), initial=0.0),
                         np.max(np.abs(self.shift_offset), initial=0.0)))

    def equal(self, other: "ClientDataset") -> bool:
        return (
            self.client_id == other.client_id
            and self.shift_applied == other.shift_applied
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.shift_scale, other.shift_scale)
            and np.array_equal(self.shift_offset, other.shift_offset)
        )


@dataclass
class FederatedDataset:
    clients: list[ClientDataset]
    test: ClientDataset
    scenario: ScenarioKind
    config: SyntheticConfig | None = None

    @property
    def num_classes(self) -> int:
        return self.test.labels.shape[1]

    @property
    def input_dim(self) -> int:
        return self.test.features.shape[1]

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(c) for c in self.clients], dtype=np.int64)

    def equal(self, other: "FederatedDataset") -> bool:
        return (
            len(self.clients) == len(other.clients)
            and all(a.equal(b) for a, b in zip(self.clients, other.clients))
            and self.test.equal(other.test)
        )


def _rng(seed: int, stream: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream, *map(int, extra)]))


def _sample(rng: np.random.Generator, cfg: SyntheticConfig, prototypes: np.ndarray, n: int):
    P = cfg.num_classes
    group = np.arange(P) % cfg.label_groups
    primary = rng.integers(0, P, size=n)
    same_group = group[None, :] == group[primary][:, None]
    prob = np.where(same_group, cfg.in_group_label_prob, cfg.extra_label_prob)
    labels = (rng.random((n, P)) < prob).astype(np.uint8)
    labels[np.arange(n), primary] = 1
    weights = labels / labels.sum(axis=1, keepdims=True)
    features = weights @ prototypes + cfg.feature_noise * rng.standard_normal((n, cfg.input_dim))
    if cfg.label_noise_rate > 0:
        flips = rng.random((n, P)) < cfg.label_noise_rate
        labels = labels ^ flips.astype(np.uint8)
        empty = labels.sum(axis=1) == 0
        labels[np.flatnonzero(empty), primary[empty]] = 1
    return features, labels, primary


def generate_global_pool(cfg: SyntheticConfig) -> SamplePool:
    """Draw class prototypes and a labeled pool, then hold out the test split.

    Each sample gets a primary class plus independent extra labels; its
    features are the mean of its positive-class prototypes plus Gaussian
    noise.
    """
    n_train = cfg.num_clients * cfg.samples_per_client_mean
    n_total = int(math.ceil(n_train / (1.0 - cfg.test_fraction)))
    for attempt in range(MAX_ATTEMPTS):
        rng = _rng(cfg.seed, 0, attempt)
        prototypes = rng.standard_normal((cfg.num_classes, cfg.input_dim))
        features, labels, primary = _sample(rng, cfg, prototypes, n_total)
        order = rng.permutation(n_total)
        train, test = order[:n_train], order[n_train:]
        if labels[train].sum(axis=0).min() > 0 and labels[test].sum(axis=0).min() > 0:
            return SamplePool(features[train], labels[train], primary[train],
                              features[test], labels[test], prototypes)
    raise ConfigError(
        f"some class has no positive example after {MAX_ATTEMPTS} attempts "
        f"(pool size {n_total}, {cfg.num_classes} classes); enlarge the pool"
    )


def _power_law_shares(rng: np.random.Generator, k: int, exponent: float) -> np.ndarray:
    raw = np.arange(1, k + 1, dtype=np.float64) ** (-exponent)
    raw = rng.permutation(raw)
    return raw / raw.sum()


def _dirichlet_split(rng: np.random.Generator, pool: SamplePool, cfg: SyntheticConfig) -> list[np.ndarray]:
    K = cfg.num_clients
    shares = _power_law_shares(rng, K, cfg.quantity_skew_exponent)
    parts: list[list[np.ndarray]] = [[] for _ in range(K)]
    for c in range(cfg.num_classes):
        idx = rng.permutation(np.flatnonzero(pool.train_primary == c))
        q = rng.dirichlet(np.full(K, cfg.dirichlet_beta)) * shares
        total = q.sum()
        if not np.isfinite(total) or total <= 0:
            q = shares.copy()
            total = q.sum()
        cuts = np.floor(np.cumsum(q / total)[:-1] * idx.size).astype(np.int64)
        for k, chunk in enumerate(np.split(idx, cuts)):
            parts[k].append(chunk)
    return [np.sort(np.concatenate(p)) for p in parts]


def partition(pool: SamplePool, cfg: SyntheticConfig, scenario: ScenarioKind | str) -> list[ClientDataset]:
    """Split the training pool across ``cfg.num_clients`` clients."""
    scenario = ScenarioKind.parse(scenario)
    K, d = cfg.num_clients, cfg.input_dim
    if pool.num_train == 0:
        raise ConfigError("empty sample pool")
    if K > pool.num_train:
        raise ConfigError(f"{K} clients but only {pool.num_train} training samples")
    for attempt in range(MAX_ATTEMPTS):
        rng = _rng(cfg.seed, 1, attempt)
        if scenario is ScenarioKind.DS1_IID:
            index_sets = np.array_split(rng.permutation(pool.num_train), K)
        else:
            index_sets = _dirichlet_split(rng, pool, cfg)
        if min(len(ix) for ix in index_sets) > 0:
            break
    else:
        raise ConfigError(f"a client received no samples after {MAX_ATTEMPTS} partition attempts")

    shift_rng = _rng(cfg.seed, 2)
    s = cfg.concept_shift_strength
    clients = []
    for k, ix in enumerate(index_sets):
        features = pool.train_features[ix]
        scale, offset = np.ones(d), np.zeros(d)
        applied = False
        if scenario is ScenarioKind.DS3_LABEL_AND_CONCEPT_SHIFT and s > 0:
            scale = shift_rng.uniform(1.0 - s, 1.0 + s, size=d)
            offset = shift_rng.uniform(-s, s, size=d)
            features = features * scale + offset
            applied = True
        clients.append(ClientDataset(k, features, pool.train_labels[ix].copy(), scale, offset,
                                     applied, scenario.value, cfg.seed))
    return clients


def make_federated_dataset(cfg: SyntheticConfig, scenario: ScenarioKind | str) -> FederatedDataset:
    scenario = ScenarioKind.parse(scenario)
    pool = generate_global_pool(cfg)
    clients = partition(pool, cfg, scenario)
    d = cfg.input_dim
    test = ClientDataset(TEST_CLIENT_ID, pool.test_features, pool.test_labels.copy(),
                         np.ones(d), np.zeros(d), False, scenario.value, cfg.seed)
    return FederatedDataset(clients, test, scenario, cfg)


# -- heterogeneity measurement ----------------------------------------------

def _kl(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def js_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon divergence in nats, clipped to [0, ln 2]."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    p, q = p / p.sum(), q / q.sum()
    m = 0.5 * (p + q)
    return float(np.clip(0.5 * _kl(p, m) + 0.5 * _kl(q, m), 0.0, math.log(2.0)))


@dataclass
class HeterogeneityReport:
    prevalence: np.ndarray  # K x P, fraction of client samples carrying each label
    divergence: np.ndarray  # K x K Jensen-Shannon matrix
    sizes: np.ndarray
    shift_magnitude: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def mean_divergence(self) -> float:
        k = self.divergence.shape[0]
        if k < 2:
            return 0.0
        return float(self.divergence[np.triu_indices(k, 1)].mean())

    @property
    def max_divergence(self) -> float:
        return float(self.divergence.max())

    def to_dict(self) -> dict:
        return {
            "sizes": self.sizes.tolist(),
            "prevalence": np.round(self.prevalence, 12).tolist(),
            "js_divergence": np.round(self.divergence, 12).tolist(),
            "mean_js_divergence": round(self.mean_divergence, 12),
            "max_js_divergence": round(self.max_divergence, 12),
            "shift_magnitude": np.round(self.shift_magnitude, 12).tolist(),
        }


def heterogeneity_report(clients: list[ClientDataset]) -> HeterogeneityReport:
    if not clients:
        raise ConfigError("heterogeneity report needs at least one client")
    prevalence = np.stack([c.labels.mean(axis=0) for c in clients])
    k = len(clients)
    div = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            div[i, j] = div[j, i] = js_divergence(prevalence[i], prevalence[j])
    return HeterogeneityReport(
        prevalence=prevalence,
        divergence=div,
        sizes=np.array([len(c) for c in clients], dtype=np.int64),
        shift_magnitude=np.array([c.shift_magnitude for c in clients]),
    )


# -- persistence ------------------------------------------------------------

def _write_record(w: Writer, c: ClientDataset) -> None:
    w.u64(c.client_id)
    w.u64(len(c))
    w.u8(1 if c.shift_applied else 0)
    w.f64(c.shift_scale)
    w.f64(c.shift_offset)
    w.f64(c.features)
    w.raw(np.packbits(np.asarray(c.labels, dtype=np.uint8).ravel()).tobytes())


def _read_record(r: Reader, d: int, P: int, scenario: str, seed: int) -> ClientDataset:
    cid = r.u64("client id")
    n = r.u64("sample count")
    applied = bool(r.u8("shift flag"))
    scale = r.f64(d, "shift scale")
    offset = r.f64(d, "shift offset")
    features = r.f64(n * d, f"features of client {cid}").reshape(n, d)
    packed = np.frombuffer(r.take((n * P + 7) // 8, f"labels of client {cid}"), dtype=np.uint8)
    labels = np.unpackbits(packed, count=n * P).reshape(n, P)
    return ClientDataset(cid, features, labels, scale, offset, applied, scenario, seed)


def sidecar_path(path: Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_dataset(dataset: FederatedDataset, path: Path) -> None:
    """Write the FBSIM1 binary dataset and its JSON provenance sidecar."""
    if not dataset.clients:
        raise ConfigError("cannot save a dataset with no clients")
    d, P = dataset.input_dim, dataset.num_classes
    w = Writer()
    w.raw(MAGIC)
    w.u64(len(dataset.clients))
    w.u64(d)
    w.u64(P)
    for c in dataset.clients:
        _write_record(w, c)
    _write_record(w, dataset.test)
    path = Path(path)
    atomic_write(path, w.getvalue())
    sidecar = {
        "format": MAGIC.decode(),
        "scenario": dataset.scenario.value,
        "synthetic_config": asdict(dataset.config) if dataset.config else None,
    }
    atomic_write(sidecar_path(path), (json.dumps(sidecar, indent=2, sort_keys=True) + "\n").encode())


def load_dataset(path: Path) -> FederatedDataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    config, scenario, seed = None, ScenarioKind.DS1_IID, 0
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
        scenario = ScenarioKind.parse(meta.get("scenario", "ds1"))
        if meta.get("synthetic_config"):
            config = SyntheticConfig(**meta["synthetic_config"])
            seed = config.seed
    r = Reader(path.read_bytes(), str(path))
    read_magic(r)
    K = r.u64("client count")
    d = r.u64("input_dim")
    P = r.u64("class count")
    if K == 0 or d == 0 or P == 0 or K > 1_000_000:
        raise ContainerError(f"{path}: implausible header (K={K}, input_dim={d}, P={P}) at offset {len(MAGIC)}")
    clients = [_read_record(r, d, P, scenario.value, seed) for _ in range(K)]
    test = _read_record(r, d, P, scenario.value, seed)
    r.expect_end()
    if test.client_id != TEST_CLIENT_ID:
        raise ContainerError(f"{path}: missing test split record")
    if test.shift_applied:
        raise ContainerError(f"{path}: test split is flagged as concept-shifted")
    return FederatedDataset(clients, test, scenario, config)
