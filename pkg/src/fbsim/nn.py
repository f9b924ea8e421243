"""Dense MLP engine over flat parameter vectors.

Layer order per hidden layer is ``linear -> batch norm (optional) -> ReLU``;
the head is a single linear layer whose logits feed a sigmoid per class.
All arrays are float64.  Weights are stored ``(fan_in, fan_out)`` so a layer
computes ``x @ W + b``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DegenerateInputError, NumericError, ShapeError

KINDS = ("weight", "bias", "bn_gamma", "bn_beta", "bn_running_mean", "bn_running_var")
BN_KINDS = frozenset({"bn_gamma", "bn_beta", "bn_running_mean", "bn_running_var"})
NON_TRAINABLE_KINDS = frozenset({"bn_running_mean", "bn_running_var"})


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    length: int
    kind: str
    shape: tuple[int, ...]

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.offset + self.length)


@functools.lru_cache(maxsize=None)
def _masks(segments: tuple[Segment, ...]) -> tuple[np.ndarray, np.ndarray]:
    size = segments[-1].offset + segments[-1].length if segments else 0
    trainable = np.ones(size, dtype=bool)
    bn = np.zeros(size, dtype=bool)
    for seg in segments:
        if seg.kind in NON_TRAINABLE_KINDS:
            trainable[seg.slice] = False
        if seg.kind in BN_KINDS:
            bn[seg.slice] = True
    trainable.setflags(write=False)
    bn.setflags(write=False)
    return trainable, bn


def check_partition(segments: Sequence[Segment]) -> int:
    """Verify that ``segments`` tile ``[0, n)`` in order and return ``n``."""
    pos = 0
    for seg in segments:
        if seg.kind not in KINDS:
            raise ShapeError(f"unknown segment kind {seg.kind!r}")
        if seg.offset != pos or seg.length != math.prod(seg.shape):
            raise ShapeError(f"segment {seg.name!r} breaks the partition at offset {pos}")
        pos += seg.length
    return pos


class ParamVector:
    """Flat float64 storage plus a named segment map.

    Used for model parameters, gradients, control variates and drift
    variables alike.  ``pv[name]`` returns a reshaped *view*.
    """

    __slots__ = ("values", "segments", "_index")

    def __init__(self, values: np.ndarray, segments: tuple[Segment, ...]):
        values = np.asarray(values, dtype=np.float64)
        segments = tuple(segments)
        n = check_partition(segments)
        if values.shape != (n,):
            raise ShapeError(f"values have shape {values.shape}, segment map covers {n}")
        self.values = values
        self.segments = segments
        self._index = {s.name: s for s in segments}

    @classmethod
    def zeros(cls, segments: tuple[Segment, ...]) -> "ParamVector":
        return cls(np.zeros(check_partition(segments)), segments)

    def __len__(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, name: str) -> np.ndarray:
        seg = self._index[name]
        return self.values[seg.slice].reshape(seg.shape)

    def __repr__(self) -> str:
        return f"ParamVector(n={len(self)}, segments={[s.name for s in self.segments]})"

    def segment(self, name: str) -> Segment:
        return self._index[name]

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.segments)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.values), self.segments)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.segments)

    def same_layout(self, other: "ParamVector") -> bool:
        return self.segments == other.segments

    @property
    def trainable_mask(self) -> np.ndarray:
        return _masks(self.segments)[0]

    @property
    def bn_mask(self) -> np.ndarray:
        return _masks(self.segments)[1]

    def equal(self, other: "ParamVector") -> bool:
        """Bit-exact comparison of layout and values."""
        return self.same_layout(other) and np.array_equal(
            self.values.view(np.uint64), other.values.view(np.uint64)
        )


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden_dims: tuple[int, ...] = (64, 32)
    num_classes: int = 8
    use_batch_norm: tuple[bool, ...] | bool = True
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        hidden = tuple(int(h) for h in self.hidden_dims)
        bn = self.use_batch_norm
        bn = (bool(bn),) * len(hidden) if isinstance(bn, (bool, int, np.bool_)) else tuple(bool(b) for b in bn)
        object.__setattr__(self, "hidden_dims", hidden)
        object.__setattr__(self, "use_batch_norm", bn)
        if self.input_dim < 1 or self.num_classes < 1 or any(h < 1 for h in hidden):
            raise ConfigError(f"invalid model dimensions in {self}")
        if len(bn) != len(hidden):
            raise ConfigError("use_batch_norm needs one flag per hidden layer")
        if not self.bn_eps > 0 or not 0 < self.bn_momentum < 1:
            raise ConfigError("bn_eps must be > 0 and bn_momentum in (0, 1)")

    @functools.cached_property
    def segments(self) -> tuple[Segment, ...]:
        layout: list[tuple[str, str, tuple[int, ...]]] = []
        fan_in = self.input_dim
        for i, (width, bn) in enumerate(zip(self.hidden_dims, self.use_batch_norm)):
            layout.append((f"hidden{i}.weight", "weight", (fan_in, width)))
            layout.append((f"hidden{i}.bias", "bias", (width,)))
            if bn:
                for kind, suffix in (("bn_gamma", "gamma"), ("bn_beta", "beta"),
                                     ("bn_running_mean", "running_mean"), ("bn_running_var", "running_var")):
                    layout.append((f"hidden{i}.bn.{suffix}", kind, (width,)))
            fan_in = width
        layout.append(("head.weight", "weight", (fan_in, self.num_classes)))
        layout.append(("head.bias", "bias", (self.num_classes,)))
        segments, offset = [], 0
        for name, kind, shape in layout:
            n = math.prod(shape)
            segments.append(Segment(name, offset, n, kind, shape))
            offset += n
        return tuple(segments)

    @property
    def num_params(self) -> int:
        last = self.segments[-1]
        return last.offset + last.length

    @property
    def feature_dim(self) -> int:
        return self.hidden_dims[-1] if self.hidden_dims else self.input_dim


@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.labels = np.atleast_2d(np.asarray(self.labels))
        n = self.features.shape[0]
        if n < 1 or self.labels.shape[0] != n:
            raise ShapeError(f"batch has {n} feature rows and {self.labels.shape[0]} label rows")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ShapeError("labels must be exactly 0 or 1")
        self.labels = self.labels.astype(np.float64)

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class LayerTrace:
    inputs: np.ndarray
    pre: np.ndarray  # linear output
    xhat: np.ndarray | None = None
    inv_std: np.ndarray | None = None
    batch_mean: np.ndarray | None = None
    batch_var: np.ndarray | None = None
    normed: np.ndarray | None = None  # BN output, ReLU input
    post: np.ndarray | None = None


@dataclass
class ForwardTrace:
    mode: str
    layers: list[LayerTrace] = field(default_factory=list)
    features: np.ndarray | None = None
    logits: np.ndarray | None = None

    @property
    def probabilities(self) -> np.ndarray:
        return sigmoid(self.logits)


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def build_model(spec: ModelSpec, seed: int) -> ParamVector:
    """Initialize parameters for ``spec`` deterministically from ``seed``.

    Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases and BN shifts 0,
    BN scales 1, running mean 0, running variance 1.
    """
    rng = np.random.default_rng(seed)
    params = ParamVector.zeros(spec.segments)
    for seg in spec.segments:
        view = params[seg.name]
        if seg.kind == "weight":
            bound = 1.0 / math.sqrt(seg.shape[0])
            view[...] = rng.uniform(-bound, bound, size=seg.shape)
        elif seg.kind in ("bn_gamma", "bn_running_var"):
            view[...] = 1.0
    return params


def _check_layout(params: ParamVector, spec: ModelSpec) -> None:
    if params.segments != spec.segments:
        raise ShapeError("parameter segment map does not match the model spec")


def forward(params: ParamVector, spec: ModelSpec, batch: Batch | np.ndarray,
            mode: str = "train", update_stats: bool = True) -> ForwardTrace:
    """Run the network on a batch.

    In ``train`` mode BN normalizes with batch statistics and (if
    ``update_stats``) folds them into the running statistics stored in
    ``params``.  ``eval`` mode reads the running statistics only and never
    mutates ``params``.
    """
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    _check_layout(params, spec)
    x = batch.features if isinstance(batch, Batch) else np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"expected features of width {spec.input_dim}, got shape {x.shape}")
    trace = ForwardTrace(mode=mode)
    a = x
    for i, bn in enumerate(spec.use_batch_norm):
        z = a @ params[f"hidden{i}.weight"] + params[f"hidden{i}.bias"]
        layer = LayerTrace(inputs=a, pre=z)
        if bn:
            gamma = params[f"hidden{i}.bn.gamma"]
            beta = params[f"hidden{i}.bn.beta"]
            running_mean = params[f"hidden{i}.bn.running_mean"]
            running_var = params[f"hidden{i}.bn.running_var"]
            if mode == "train":
                mean = z.mean(axis=0)
                var = z.var(axis=0)
                if update_stats:
                    m = spec.bn_momentum
                    n = z.shape[0]
                    unbiased = var * (n / (n - 1)) if n > 1 else var
                    running_mean[...] = (1.0 - m) * running_mean + m * mean
                    running_var[...] = (1.0 - m) * running_var + m * unbiased
            else:
                mean, var = running_mean, running_var
            inv_std = 1.0 / np.sqrt(var + spec.bn_eps)
            xhat = (z - mean) * inv_std
            normed = gamma * xhat + beta
            layer.xhat, layer.inv_std = xhat, inv_std
            layer.batch_mean, layer.batch_var = (mean, var) if mode == "train" else (None, None)
        else:
            normed = z
        layer.normed = normed
        a = np.maximum(normed, 0.0)
        layer.post = a
        trace.layers.append(layer)
    trace.features = a
    trace.logits = a @ params["head.weight"] + params["head.bias"]
    return trace


def bce_loss(trace: ForwardTrace | np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Binary cross entropy on logits: mean over samples, sum over classes.

    Returns the loss and its gradient with respect to the logits.
    """
    z = trace.logits if isinstance(trace, ForwardTrace) else np.atleast_2d(np.asarray(trace, dtype=np.float64))
    y = np.atleast_2d(np.asarray(labels, dtype=np.float64))
    if z.shape != y.shape:
        raise ShapeError(f"logits {z.shape} and labels {y.shape} differ")
    n = z.shape[0]
    # max(z, 0) - z*y + log(1 + exp(-|z|))
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    loss = float(per.sum() / n)
    return loss, (sigmoid(z) - y) / n


def bce_from_probabilities(probs: np.ndarray, labels: np.ndarray) -> float:
    """BCE for directly supplied probabilities, clamped to [1e-12, 1 - 1e-12]."""
    p = np.clip(np.atleast_2d(np.asarray(probs, dtype=np.float64)), 1e-12, 1.0 - 1e-12)
    y = np.atleast_2d(np.asarray(labels, dtype=np.float64))
    if p.shape != y.shape:
        raise ShapeError(f"probabilities {p.shape} and labels {y.shape} differ")
    return float(-(y * np.log(p) + (1.0 - y) * np.log1p(-p)).sum() / p.shape[0])


def backward(params: ParamVector, spec: ModelSpec, trace: ForwardTrace,
             dlogits: np.ndarray, dfeatures: np.ndarray | None = None) -> ParamVector:
    """Gradient of a loss w.r.t. ``params`` given its logit (and feature) gradients.

    ``dfeatures`` is an extra gradient on the penultimate activations, used
    by losses defined on the features.  Running-statistic segments always
    receive zero gradient.
    """
    if trace.mode != "train":
        raise ContractError("backward needs a train-mode trace")
    _check_layout(params, spec)
    grad = params.zeros_like()
    feats = trace.features
    grad["head.weight"][...] = feats.T @ dlogits
    grad["head.bias"][...] = dlogits.sum(axis=0)
    da = dlogits @ params["head.weight"].T
    if dfeatures is not None:
        da = da + dfeatures
    for i in reversed(range(len(spec.hidden_dims))):
        layer = trace.layers[i]
        dnormed = da * (layer.normed > 0)
        if spec.use_batch_norm[i]:
            gamma = params[f"hidden{i}.bn.gamma"]
            xhat = layer.xhat
            grad[f"hidden{i}.bn.gamma"][...] = (dnormed * xhat).sum(axis=0)
            grad[f"hidden{i}.bn.beta"][...] = dnormed.sum(axis=0)
            dxhat = dnormed * gamma
            n = xhat.shape[0]
            dz = (layer.inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dz = dnormed
        grad[f"hidden{i}.weight"][...] = layer.inputs.T @ dz
        grad[f"hidden{i}.bias"][...] = dz.sum(axis=0)
        if i > 0:
            da = dz @ params[f"hidden{i}.weight"].T
    return grad


def finite_diff_grad(params: ParamVector, spec: ModelSpec, batch: Batch | None,
                     loss_fn: Callable[[ParamVector, ModelSpec, Batch | None], float],
                     epsilon: float = 1e-6) -> ParamVector:
    """Central-difference gradient of ``loss_fn`` over the trainable coordinates.

    ``loss_fn`` receives a perturbed copy of ``params`` each call, so it may
    mutate running statistics freely.
    """
    if not epsilon > 0:
        raise ContractError("epsilon must be positive")
    grad = params.zeros_like()
    base = params.values
    for k in np.flatnonzero(params.trainable_mask):
        plus = base.copy()
        plus[k] += epsilon
        minus = base.copy()
        minus[k] -= epsilon
        f_plus = loss_fn(params.with_values(plus), spec, batch)
        f_minus = loss_fn(params.with_values(minus), spec, batch)
        grad.values[k] = (f_plus - f_minus) / (2.0 * epsilon)
    return grad


def relative_error(analytic: np.ndarray, reference: np.ndarray, floor: float = 1e-12) -> float:
    """Max absolute deviation normalized by the reference's largest entry.

    Normwise rather than per-coordinate: coordinates whose true gradient is
    ~0 (e.g. a linear bias feeding BN) would otherwise divide noise by noise.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    r = np.asarray(reference, dtype=np.float64).ravel()
    return float(np.max(np.abs(a - r)) / max(np.max(np.abs(r)), floor)) if r.size else 0.0


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_rows(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise cosine similarity and its gradient with respect to ``a``."""
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise DegenerateInputError("cosine similarity of a zero feature vector (dead feature extractor)")
    sim = np.einsum("ij,ij->i", a, b) / (na * nb)
    dsim = b / (na * nb)[:, None] - sim[:, None] * a / (na ** 2)[:, None]
    return sim, dsim


@dataclass
class OptimizerConfig:
    mode: str = "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.mode not in ("sgd", "adam"):
            raise ConfigError(f"optimizer mode must be 'sgd' or 'adam', got {self.mode!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0 and self.weight_decay >= 0):
            raise ConfigError(f"invalid optimizer settings {self}")


class Optimizer:
    """SGD or bias-corrected Adam acting in place on a ParamVector."""

    def __init__(self, config: OptimizerConfig, size: int):
        self.config = config
        self.t = 0
        if config.mode == "adam":
            self.m = np.zeros(size)
            self.v = np.zeros(size)

    def step(self, params: ParamVector, grad: ParamVector | np.ndarray, eta: float) -> ParamVector:
        if not eta > 0:
            raise ContractError("learning rate must be positive")
        g = grad.values if isinstance(grad, ParamVector) else np.asarray(grad, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            bad = np.flatnonzero(~np.isfinite(g))
            raise NumericError("non-finite gradient", first_index=int(bad[0]), count=int(bad.size))
        cfg = self.config
        if cfg.weight_decay:
            g = g + cfg.weight_decay * np.where(params.trainable_mask, params.values, 0.0)
        self.t += 1
        if cfg.mode == "sgd":
            params.values -= eta * g
            return params
        self.m *= cfg.beta1
        self.m += (1.0 - cfg.beta1) * g
        self.v *= cfg.beta2
        self.v += (1.0 - cfg.beta2) * g * g
        m_hat = self.m / (1.0 - cfg.beta1 ** self.t)
        v_hat = self.v / (1.0 - cfg.beta2 ** self.t)
        params.values -= eta * m_hat / (np.sqrt(v_hat) + cfg.eps)
        return params


def optimizer_step(state: Optimizer, params: ParamVector, grad: ParamVector | np.ndarray, eta: float) -> ParamVector:
    return state.step(params, grad, eta)


def predict_proba(params: ParamVector, spec: ModelSpec, features: np.ndarray) -> np.ndarray:
    return forward(params, spec, features, mode="eval").probabilities
