"""Per-client hypernetworks producing layer-wise aggregation weights.

A hypernetwork maps its learnable embedding ``t`` through one ReLU hidden
layer to an ``L x K`` logit table; a softmax over the client axis turns each
row into the mixing weights for one parameter group (segment) ``l``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import ParamVector, Segment


@dataclass(frozen=True)
class HypernetShape:
    num_layers: int
    num_clients: int
    embed_dim: int = 8
    hidden: int = 32

    @property
    def segments(self) -> tuple[Segment, ...]:
        L, K, e, h = self.num_layers, self.num_clients, self.embed_dim, self.hidden
        layout = [
            ("embedding", "weight", (e,)),
            ("fc1.weight", "weight", (e, h)),
            ("fc1.bias", "bias", (h,)),
            ("out.weight", "weight", (h, L * K)),
            ("out.bias", "bias", (L * K,)),
        ]
        segs, offset = [], 0
        for name, kind, shape in layout:
            n = math.prod(shape)
            segs.append(Segment(name, offset, n, kind, shape))
            offset += n
        return tuple(segs)


def init_hypernet(shape: HypernetShape, rng: np.random.Generator) -> ParamVector:
    """Zero embedding and zero output layer, so the first alpha is uniform.

    The hidden layer is randomly initialized (bias included) so that the
    output layer receives non-zero gradients while the embedding is still 0.
    """
    hn = ParamVector.zeros(shape.segments)
    bound = 1.0 / math.sqrt(shape.embed_dim)
    hn["fc1.weight"][...] = rng.uniform(-bound, bound, size=(shape.embed_dim, shape.hidden))
    hn["fc1.bias"][...] = rng.uniform(-bound, bound, size=shape.hidden)
    return hn


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def hypernet_forward(hn: ParamVector, shape: HypernetShape, return_cache: bool = False):
    """Aggregation weights ``alpha`` with shape ``(num_layers, num_clients)``."""
    t = hn["embedding"]
    pre = t @ hn["fc1.weight"] + hn["fc1.bias"]
    hidden = np.maximum(pre, 0.0)
    logits = (hidden @ hn["out.weight"] + hn["out.bias"]).reshape(shape.num_layers, shape.num_clients)
    alpha = _softmax_rows(logits)
    if return_cache:
        return alpha, (pre, hidden)
    return alpha


def mix_models(alpha: np.ndarray, models: list[ParamVector]) -> ParamVector:
    """Per segment ``l``: sum_j alpha[l, j] * models[j][l]."""
    template = models[0]
    stacked = np.stack([m.values for m in models])
    out = template.zeros_like()
    for l, seg in enumerate(template.segments):
        out.values[seg.slice] = alpha[l] @ stacked[:, seg.slice]
    return out


def hypernet_vjp(hn: ParamVector, shape: HypernetShape, models: list[ParamVector],
                 upstream: np.ndarray) -> ParamVector:
    """Gradient of ``<mix_models(alpha(hn), models), upstream>`` w.r.t. ``hn``."""
    alpha, (pre, hidden) = hypernet_forward(hn, shape, return_cache=True)
    stacked = np.stack([m.values for m in models])
    dalpha = np.empty_like(alpha)
    for l, seg in enumerate(models[0].segments):
        dalpha[l] = stacked[:, seg.slice] @ upstream[seg.slice]
    dlogits = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
    dlogits = dlogits.ravel()
    grad = hn.zeros_like()
    grad["out.weight"][...] = np.outer(hidden, dlogits)
    grad["out.bias"][...] = dlogits
    dpre = (hn["out.weight"] @ dlogits) * (pre > 0)
    grad["fc1.weight"][...] = np.outer(hn["embedding"], dpre)
    grad["fc1.bias"][...] = dpre
    grad["embedding"][...] = hn["fc1.weight"] @ dpre
    return grad
