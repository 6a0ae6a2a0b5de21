"""Single-query multi-head attention over the encoded state window."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import BatchNormParams


@dataclass
class AttentionParams:
    W_xh: T.Tensor  # (D+H)×H query map
    b_xh: T.Tensor
    W_k: T.Tensor  # (H+n_pe)×H
    b_k: T.Tensor
    W_v: T.Tensor
    b_v: T.Tensor
    bn_key: BatchNormParams
    bn_value: BatchNormParams
    heads: int
    use_linear_activation: bool = True
    bn_query: Optional[BatchNormParams] = None  # only with activate_query

    def __post_init__(self):
        hidden = self.W_k.shape[1]
        if self.heads < 1 or hidden % self.heads:
            raise ContractError(f"hidden size {hidden} is not divisible by {self.heads} heads")

    @property
    def hidden(self):
        return self.W_k.shape[1]

    @property
    def d_k(self):
        return self.hidden // self.heads

    @property
    def activate_query(self):
        return self.bn_query is not None

    @classmethod
    def init(cls, rng, input_size, hidden, memory_features, heads, use_linear_activation=True,
             activate_query=False, prefix="attn"):
        bound = 1.0 / math.sqrt(hidden)

        def w(rows, name):
            return T.parameter(rng.uniform(-bound, bound, (rows, hidden)), name=f"{prefix}.{name}")

        def b(name):
            return T.parameter(np.zeros(hidden), name=f"{prefix}.{name}")

        return cls(
            W_xh=w(input_size + hidden, "W_xh"), b_xh=b("b_xh"),
            W_k=w(memory_features, "W_k"), b_k=b("b_k"),
            W_v=w(memory_features, "W_v"), b_v=b("b_v"),
            bn_key=BatchNormParams.create(hidden, name=f"{prefix}.bn_key"),
            bn_value=BatchNormParams.create(hidden, name=f"{prefix}.bn_value"),
            heads=heads,
            use_linear_activation=use_linear_activation,
            bn_query=BatchNormParams.create(hidden, name=f"{prefix}.bn_query") if activate_query else None,
        )


def _bn_elu(x, bn, training):
    return T.batch_norm_features(T.elu(x), bn, training)


def make_query(x_t: T.Tensor, h_prev: T.Tensor, p: AttentionParams, training=False) -> T.Tensor:
    """Affine map of ``[x_t, h_prev]``; no activation unless ``activate_query``."""
    if x_t.ndim != 2 or h_prev.ndim != 2 or x_t.shape[0] != h_prev.shape[0]:
        raise DimensionError(f"make_query: input {x_t.shape} and hidden {h_prev.shape} are incompatible")
    if x_t.shape[1] + h_prev.shape[1] != p.W_xh.shape[0]:
        raise DimensionError(
            f"make_query: [x, h] of width {x_t.shape[1] + h_prev.shape[1]} vs W_xh {p.W_xh.shape}")
    q = T.add(T.matmul(T.concat([x_t, h_prev], axis=-1), p.W_xh), p.b_xh)
    if p.activate_query:
        q = _bn_elu(q, p.bn_query, training)
    return q


def attend(query: T.Tensor, memory: T.Tensor, p: AttentionParams, training=False):
    """Attend from one query per batch row over the k memory slots.

    Returns ``(a_t, weights)`` with ``a_t`` B×H and ``weights`` B×heads×k.
    """
    if memory.ndim != 3 or memory.shape[1] == 0:
        raise ContractError(f"attend: memory must be B×k×F with k >= 1, got {memory.shape}")
    if memory.shape[2] != p.W_k.shape[0]:
        raise DimensionError(f"attend: memory {memory.shape} vs key map {p.W_k.shape}")
    if query.shape != (memory.shape[0], p.hidden):
        raise DimensionError(f"attend: query {query.shape} vs memory {memory.shape}, hidden {p.hidden}")
    B, k, _ = memory.shape
    heads, d_k = p.heads, p.d_k

    key = T.add(T.matmul(memory, p.W_k), p.b_k)
    value = T.add(T.matmul(memory, p.W_v), p.b_v)
    if p.use_linear_activation:
        key = _bn_elu(key, p.bn_key, training)
        value = _bn_elu(value, p.bn_value, training)

    q = T.reshape(query, (B, heads, d_k))
    key = T.reshape(key, (B, k, heads, d_k))
    value = T.reshape(value, (B, k, heads, d_k))
    logits = T.scale(T.einsum("bhd,bjhd->bhj", q, key), 1.0 / math.sqrt(d_k))
    weights = T.softmax(logits, axis=-1)
    out = T.einsum("bhj,bjhd->bhd", weights, value)
    return T.reshape(out, (B, heads * d_k)), weights
