"""One time step of the LSTM, BN-LSTM and LARNN cells.

Gate weights are stored fused: ``W_x`` is D×(n·H) and ``W_h`` is H×(n·H) with
column blocks ordered forget, input, output, candidate. Layer mode computes
its candidate from a separate affine map, so its fused blocks stop at the
output gate (n = 3).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .attention import AttentionParams, attend, make_query
from .encoding import DEFAULT_N_PE, EncodingSpec, concat_encoding
from .errors import ContractError, DimensionError, NumericError
from .state_queue import StateQueue
from .tensor import BatchNormParams

MODES = ("vanilla", "bnlstm", "larnn_residual", "larnn_layer")
GATES = ("forget", "input", "output", "candidate")
FORGET_BIAS = 1.0
CELL_BN_GAMMA = 0.1


@dataclass
class CellParams:
    mode: str
    input_size: int
    hidden: int
    W_x: T.Tensor
    W_h: T.Tensor
    b: T.Tensor
    bn_gates: list = field(default_factory=list)
    bn_cell: Optional[BatchNormParams] = None
    bn_out: Optional[BatchNormParams] = None
    W_ac: Optional[T.Tensor] = None
    W_a: Optional[T.Tensor] = None
    b_a: Optional[T.Tensor] = None
    attention: Optional[AttentionParams] = None
    window: int = 0
    encoding: Optional[EncodingSpec] = None
    layer_tanh: bool = False

    @property
    def is_larnn(self):
        return self.mode.startswith("larnn")

    @property
    def uses_bn(self):
        return self.mode != "vanilla"

    def named_parameters(self, prefix=""):
        """Learnable tensors keyed by stable names, in a fixed order."""
        out = {}

        def put(name, t):
            if t is not None:
                out[prefix + name] = t

        put("W_x", self.W_x)
        put("W_h", self.W_h)
        put("b", self.b)
        for name, bn in self.batch_norms().items():
            put(f"{name}.gamma", bn.gamma)
            put(f"{name}.beta", bn.beta)
        put("W_ac", self.W_ac)
        put("W_a", self.W_a)
        put("b_a", self.b_a)
        a = self.attention
        if a is not None:
            for name in ("W_xh", "b_xh", "W_k", "b_k", "W_v", "b_v"):
                put(f"attn.{name}", getattr(a, name))
        return out

    def batch_norms(self):
        out = {}
        for gate, bn in zip(GATES, self.bn_gates):
            out[f"bn_{gate}"] = bn
        if self.bn_cell is not None:
            out["bn_cell"] = self.bn_cell
            out["bn_out"] = self.bn_out
        a = self.attention
        if a is not None:
            out["attn.bn_key"] = a.bn_key
            out["attn.bn_value"] = a.bn_value
            if a.bn_query is not None:
                out["attn.bn_query"] = a.bn_query
        return out


@dataclass
class CellState:
    h: T.Tensor
    c: T.Tensor
    queue: Optional[StateQueue] = None
    weights: Optional[T.Tensor] = None  # attention weights of the step that produced this state


def init_params(seed, input_size, hidden, window=0, mode="larnn_residual", *, heads=None,
                n_pe=DEFAULT_N_PE, use_pe=True, use_linear_activation=True, layer_tanh=False,
                activate_query=False, prefix="") -> CellParams:
    """Weights ~ U(-1/sqrt(H), 1/sqrt(H)); biases zero except forget bias 1.

    ``seed`` is an int or a ``numpy.random.Generator``. Gate weights are drawn
    before any attention weights, so two modes built from the same seed share
    their LSTM part exactly.
    """
    if mode not in MODES:
        raise ContractError(f"unknown cell mode {mode!r}; expected one of {MODES}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    D, H = input_size, hidden
    bound = 1.0 / math.sqrt(H)
    larnn = mode.startswith("larnn")
    if larnn and window < 1:
        raise ContractError(f"LARNN modes need a window k >= 1, got {window}")
    n_blocks = 3 if mode == "larnn_layer" else 4

    def uniform(*shape):
        return rng.uniform(-bound, bound, shape)

    b = np.zeros(n_blocks * H)
    b[:H] = FORGET_BIAS
    p = CellParams(
        mode=mode, input_size=D, hidden=H,
        W_x=T.parameter(uniform(D, n_blocks * H), name=prefix + "W_x"),
        W_h=T.parameter(uniform(H, n_blocks * H), name=prefix + "W_h"),
        b=T.parameter(b, name=prefix + "b"),
    )
    if mode == "vanilla":
        return p

    p.bn_gates = [BatchNormParams.create(H, name=f"{prefix}bn_{g}") for g in GATES[:n_blocks]]
    p.bn_cell = BatchNormParams.create(H, gamma=CELL_BN_GAMMA, name=prefix + "bn_cell")
    p.bn_out = BatchNormParams.create(H, name=prefix + "bn_out")
    if not larnn:
        return p

    heads = heads if heads is not None else max(1, H // 2)
    spec = EncodingSpec(window, n_pe) if use_pe and n_pe > 0 else None
    p.window = window
    p.encoding = spec
    p.layer_tanh = layer_tanh
    if mode == "larnn_residual":
        p.W_ac = T.parameter(uniform(H, H), name=prefix + "W_ac")
    else:
        p.W_a = T.parameter(uniform(D + 2 * H, H), name=prefix + "W_a")
        p.b_a = T.parameter(np.zeros(H), name=prefix + "b_a")
    memory_features = H + (spec.n_pe if spec else 0)
    p.attention = AttentionParams.init(rng, D, H, memory_features, heads,
                                       use_linear_activation=use_linear_activation,
                                       activate_query=activate_query, prefix=prefix + "attn")
    return p


def initial_state(params: CellParams, batch: int, init="zeros", value=0.0) -> CellState:
    H = params.hidden
    queue = StateQueue.new(params.window, batch, H, init, value) if params.is_larnn else None
    return CellState(T.Tensor(np.zeros((batch, H))), T.Tensor(np.zeros((batch, H))), queue)


def _check_finite(name, t):
    if not np.isfinite(t.data).all():
        raise NumericError(f"non-finite values in {name} gate")


def step(params: CellParams, state: CellState, x_t: T.Tensor, training=False):
    """Advance one time step; returns ``(h_t, new_state)``."""
    p = params
    H = p.hidden
    if x_t.ndim != 2 or x_t.shape[1] != p.input_size:
        raise DimensionError(f"step: input shape {x_t.shape} vs input size {p.input_size}")
    if state.h.shape != (x_t.shape[0], H):
        raise DimensionError(f"step: hidden state {state.h.shape} vs batch {x_t.shape[0]}, hidden {H}")
    h_prev, c_prev = state.h, state.c

    a_t = weights = None
    if p.is_larnn:
        if state.queue is None or p.window < 1:
            raise ContractError("LARNN step needs a state queue with window k >= 1")
        v_t = state.queue.as_tensor()
        memory = concat_encoding(v_t, p.encoding) if p.encoding is not None else v_t
        query = make_query(x_t, h_prev, p.attention, training)
        a_t, weights = attend(query, memory, p.attention, training)

    pre = T.add(T.add(T.matmul(x_t, p.W_x), T.matmul(h_prev, p.W_h)), p.b)
    blocks = T.split(pre, [H] * (pre.shape[1] // H), axis=-1)

    if p.mode == "vanilla":
        f, i, o, g = T.sigmoid(blocks[0]), T.sigmoid(blocks[1]), T.sigmoid(blocks[2]), T.tanh(blocks[3])
    else:
        f, i, o = (T.sigmoid(T.batch_norm_features(blk, bn, training))
                   for blk, bn in zip(blocks[:3], p.bn_gates))
        if p.mode == "larnn_layer":
            g = T.add(T.matmul(T.concat([x_t, h_prev, a_t], axis=-1), p.W_a), p.b_a)
            if p.layer_tanh:
                g = T.tanh(g)
        else:
            g_pre = blocks[3]
            if p.mode == "larnn_residual":
                g_pre = T.add(g_pre, T.matmul(a_t, p.W_ac))
            g = T.tanh(T.batch_norm_features(g_pre, p.bn_gates[3], training))
    for name, gate in zip(GATES, (f, i, o, g)):
        _check_finite(name, gate)

    c = T.add(T.mul(f, c_prev), T.mul(i, g))
    if p.mode == "vanilla":
        h = T.mul(o, T.tanh(c))
    else:
        c = T.batch_norm_features(c, p.bn_cell, training)
        h = T.batch_norm_features(T.mul(o, T.elu(c)), p.bn_out, training)

    queue = state.queue.push(c) if p.is_larnn else None
    return h, CellState(h, c, queue, weights)


def parameter_count(params: CellParams) -> int:
    return sum(t.data.size for t in params.named_parameters().values())
