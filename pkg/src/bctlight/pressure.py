"""Efficient pressure and attention-weighted adaptive pressure.

Lane matrices are (4, 3, 3) arrays: one layer per exit side (E, W, S, N),
one row per lane, columns (waiting, running, total). In the upstream matrix
row k of layer s is the lane of kind k whose movement leaves toward s; in
the downstream matrix row j is lane j of the road leaving toward s. The
attention in each layer therefore scores every upstream lane against the
three downstream lanes it can feed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class EmptyLaneSet(ValueError):
    pass


class NonFiniteParams(ValueError):
    pass


class WeightRowNotStochastic(ValueError):
    pass


def _weighted_sum(weights, values) -> float:
    total = 0.0
    for w, v in zip(weights, values):
        total += w * v
    return total


def efficient_pressure(up_queues, down_queues) -> float:
    """Mean upstream queue minus mean downstream queue."""
    up, down = list(up_queues), list(down_queues)
    if not up or not down:
        raise EmptyLaneSet("efficient pressure needs at least one upstream and one downstream lane")
    return _weighted_sum([1.0 / len(up)] * len(up), up) - _weighted_sum([1.0 / len(down)] * len(down), down)


def adaptive_pressure(x_up: float, x_down, weights_row, atol: float = 1e-9) -> float:
    """Queue on one upstream lane minus the attention-weighted downstream queues."""
    w = np.asarray(weights_row, dtype=float)
    if np.any(w < 0) or abs(w.sum() - 1.0) > atol:
        raise WeightRowNotStochastic(f"weights must be a probability row, got {w}")
    return x_up - _weighted_sum(w.tolist(), list(x_down))


def adaptive_pressures(upstream: np.ndarray, downstream: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Vectorised pressure for every upstream lane; shapes (..., 4, 3, 3) -> (..., 4, 3)."""
    return upstream[..., 0] - (weights @ downstream[..., 0][..., None])[..., 0]


@dataclass
class AttentionParams:
    wq: np.ndarray  # (head, 3, d_k)
    wk: np.ndarray  # (head, 3, d_k)
    wm: np.ndarray  # (head,) logits of the convex mix of heads

    @classmethod
    def init(cls, rng: np.random.Generator, head: int = 4, d_k: int = 8, n_features: int = 3) -> "AttentionParams":
        if head < 1 or d_k < 1:
            raise ValueError("head and d_k must be >= 1")
        return cls(
            wq=rng.normal(0.0, 1.0 / np.sqrt(n_features), (head, n_features, d_k)),
            wk=rng.normal(0.0, 1.0 / np.sqrt(n_features), (head, n_features, d_k)),
            wm=rng.normal(0.0, 0.1, head),
        )

    @property
    def head(self) -> int:
        return self.wq.shape[0]

    @property
    def d_k(self) -> int:
        return self.wq.shape[2]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"wq": self.wq, "wk": self.wk, "wm": self.wm}

    def check_finite(self) -> None:
        for name, arr in self.as_dict().items():
            if not np.all(np.isfinite(arr)):
                raise NonFiniteParams(f"attention parameter {name} is not finite")


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    return p * (dp - (dp * p).sum(axis=-1, keepdims=True))


def attention_forward(params: AttentionParams, upstream: np.ndarray, downstream: np.ndarray,
                      feature_scale: float = 1.0):
    """Row-stochastic weights (..., 4, 3, 3) plus a cache for :func:`attention_backward`."""
    qs = np.asarray(upstream, dtype=float) / feature_scale
    ks = np.asarray(downstream, dtype=float) / feature_scale
    batched = qs.ndim == 4
    if not batched:
        qs, ks = qs[None], ks[None]
    root = np.sqrt(params.d_k)
    q = qs[:, :, None] @ params.wq  # (b, layer, head, row, d_k)
    k = ks[:, :, None] @ params.wk
    heads = _softmax((q @ k.swapaxes(-1, -2)) / root)  # (b, layer, head, row, col)
    # a convex mix of row-stochastic heads is row-stochastic, and the same mix
    # for every cell keeps the map equivariant to the order of downstream lanes
    mix = _softmax(params.wm)
    weights = np.tensordot(heads, mix, axes=([2], [0]))
    cache = (qs, ks, q, k, heads, mix, batched)
    return (weights if batched else weights[0]), cache


def attention_backward(params: AttentionParams, cache, d_weights: np.ndarray) -> dict[str, np.ndarray]:
    qs, ks, q, k, heads, mix, batched = cache
    dw = d_weights if batched else d_weights[None]
    root = np.sqrt(params.d_k)
    grads = {"wm": _softmax_backward(mix, np.einsum("blhrc,blrc->h", heads, dw))}
    dheads = dw[:, :, None] * mix[:, None, None]
    ds = _softmax_backward(heads, dheads) / root
    dq = ds @ k
    dk = ds.swapaxes(-1, -2) @ q
    grads["wq"] = (qs[:, :, None].swapaxes(-1, -2) @ dq).sum(axis=(0, 1))
    grads["wk"] = (ks[:, :, None].swapaxes(-1, -2) @ dk).sum(axis=(0, 1))
    return grads


def attention_weights(params: AttentionParams, upstream: np.ndarray, downstream: np.ndarray,
                      feature_scale: float = 1.0) -> np.ndarray:
    params.check_finite()
    return attention_forward(params, upstream, downstream, feature_scale)[0]
