"""Minimal dense tensors with tape-based reverse-mode differentiation.

Every operation takes :class:`Tensor` operands and returns a new tensor. When
at least one operand is tracked (a parameter leaf or the output of a tracked
operation) the operation is appended to the active :class:`Tape` together with
a closure mapping the output gradient to operand gradients. :func:`backward`
replays the tape in reverse recording order.

Shapes follow the (batch, time, feature) convention. The only implicit
broadcast is the addition of a rank-1 bias over the innermost axis.
"""

from __future__ import annotations

import builtins
import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

DTYPE = np.float64

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1
ELU_ALPHA = 1.0


class Node:
    """Handle to one entry of a tape; stale once the tape is cleared."""

    __slots__ = ("tape", "generation", "index")

    def __init__(self, tape, generation, index):
        self.tape = tape
        self.generation = generation
        self.index = index

    @property
    def valid(self):
        return self.generation == self.tape.generation


class _Entry:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of tracked operations for one forward pass."""

    def __init__(self):
        self.entries: list[_Entry] = []
        self.generation = 0
        self.enabled = True

    def record(self, out, inputs, backward):
        node = Node(self, self.generation, len(self.entries))
        self.entries.append(_Entry(out, inputs, backward))
        return node

    def clear(self):
        # bumping the generation invalidates every outstanding Node at once
        self.entries = []
        self.generation += 1

    def __len__(self):
        return len(self.entries)


_local = threading.local()


def get_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


@contextlib.contextmanager
def no_grad():
    """Run operations without recording them, e.g. for evaluation passes."""
    tape = get_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "node", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        # asarray rather than ascontiguousarray, which would promote 0-d to 1-d
        self.data = np.require(np.asarray(data, dtype=DTYPE), requirements="C")
        self.grad = None
        self.node = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def tracked(self):
        return self.requires_grad

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(out_data, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``out_data`` and register it on the tape if any input is tracked.

    ``backward(grad)`` must return one gradient (or ``None``) per input.
    Library modules use this to define fused operations.
    """
    out = Tensor(out_data)
    tape = get_tape()
    if tape.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = tape.record(out, tuple(inputs), backward)
    return out


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# -- arithmetic -------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        if b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1]:
            return _bias_add(a, b)
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return record(a.data + b.data, (a, b), lambda g: (g, g))


def _bias_add(a, b):
    axes = tuple(range(a.ndim - 1))
    return record(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=axes)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return record(a.data * c, (a,), lambda g: (g * c,))


def add_many(tensors: Sequence[Tensor]) -> Tensor:
    """Sum of equally shaped tensors as a single tape entry."""
    tensors = list(tensors)
    for t in tensors[1:]:
        _same_shape(tensors[0], t, "add_many")
    out = tensors[0].data.copy()
    for t in tensors[1:]:
        out += t.data
    n = len(tensors)
    return record(out, tensors, lambda g: (g,) * n)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with ``a`` of rank 2 or 3 and ``b`` of rank 2."""
    if b.ndim != 2 or a.ndim not in (2, 3) or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ bd.T
        if ad.ndim == 2:
            gb = ad.T @ g
        else:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return record(ad @ bd, (a, b), backward)


def einsum(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand contraction.

    Every index of an operand must appear in the other operand or in the
    output, which holds for the batched products used by attention.
    """
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for s, other in ((sa, sb), (sb, sa)):
        if any(c not in other and c not in out_sub for c in s):
            raise ContractError(f"einsum: unsupported contraction {subscripts!r}")
    try:
        out = np.einsum(subscripts, a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"einsum {subscripts!r}: shapes {a.shape} and {b.shape}: {exc}") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = np.einsum(f"{out_sub},{sb}->{sa}", g, bd)
        gb = np.einsum(f"{out_sub},{sa}->{sb}", g, ad)
        return ga, gb

    return record(out, (a, b), backward)


# -- elementwise nonlinearities --------------------------------------------


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return record(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return record(y, (x,), lambda g: (g * (1.0 - y * y),))


def elu(x: Tensor) -> Tensor:
    d = x.data
    neg = np.expm1(np.minimum(d, 0.0)) * ELU_ALPHA
    y = np.where(d >= 0, d, neg)
    slope = np.where(d >= 0, 1.0, neg + ELU_ALPHA)
    return record(y, (x,), lambda g: (g * slope,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return record(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    d = x.data
    return record(np.log(d), (x,), lambda g: (g / d,))


_ELEMENTWISE = {"sigmoid": sigmoid, "tanh": tanh, "elu": elu, "exp": exp, "log": log}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, *args: Tensor) -> Tensor:
    """Dispatch by name, e.g. ``elementwise("elu", x)`` or ``elementwise("mul", a, b)``."""
    if op in _ELEMENTWISE:
        (x,) = args
        return _ELEMENTWISE[op](x)
    if op in _BINARY:
        a, b = args
        return _BINARY[op](a, b)
    raise ContractError(f"unknown elementwise op {op!r}")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record(y, (x,), backward)


# -- reductions ------------------------------------------------------------


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return record(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return record(np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))


# -- structural ops --------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {shape}") from None
    return record(y, (x,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat: no tensors given")
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            d != e for i, (d, e) in enumerate(zip(t.shape, ref.shape)) if i != axis
        ):
            raise DimensionError(f"concat: shapes {ref.shape} and {t.shape} disagree off axis {axis}")
    y = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record(y, tensors, backward)


def concat_time(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=1)


def concat_feature(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=-1)


def take(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    """Contiguous slice ``[start:stop]`` along ``axis``."""
    axis = axis % x.ndim
    index = (slice(None),) * axis + (slice(start, stop),)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return record(x.data[index], (x,), backward)


def split(x: Tensor, sizes: Iterable[int], axis: int = -1) -> list[Tensor]:
    sizes = list(sizes)
    axis_len = x.shape[axis % x.ndim]
    if builtins.sum(sizes) != axis_len:
        raise DimensionError(f"split: sizes {sizes} do not cover extent {axis_len} of {x.shape}")
    out, start = [], 0
    for n in sizes:
        out.append(take(x, start, start + n, axis))
        start += n
    return out


def select(x: Tensor, index: int, axis: int = 1) -> Tensor:
    """Drop ``axis`` by picking one position, e.g. time step ``t`` of B×T×D."""
    axis = axis % x.ndim
    idx = (slice(None),) * axis + (index,)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return record(x.data[idx], (x,), backward)


def stack(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    for t in tensors[1:]:
        _same_shape(tensors[0], t, "stack")
    y = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return record(y, tensors, backward)


# -- batch normalization ---------------------------------------------------


@dataclass
class BatchNormParams:
    """Per-feature affine parameters and running statistics."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = BN_EPSILON
    momentum: float = BN_MOMENTUM

    @classmethod
    def create(cls, features, gamma=1.0, name="bn"):
        return cls(
            gamma=parameter(np.full(features, float(gamma)), name=f"{name}.gamma"),
            beta=parameter(np.zeros(features), name=f"{name}.beta"),
            running_mean=np.zeros(features),
            running_var=np.ones(features),
        )

    @property
    def features(self):
        return self.gamma.shape[0]


def batch_norm_features(x: Tensor, p: BatchNormParams, training: bool) -> Tensor:
    """Normalize over the innermost (feature) axis.

    Rank-3 input is flattened to (batch*time)×feature for the statistics and
    restored afterwards. Training mode uses the biased batch variance and
    folds the unbiased estimate into ``running_var``.
    """
    if x.ndim not in (2, 3):
        raise DimensionError(f"batch_norm: expected rank 2 or 3, got shape {x.shape}")
    nf = x.shape[-1]
    if nf != p.features:
        raise DimensionError(f"batch_norm: input shape {x.shape} vs {p.features} features")
    shape = x.shape
    x2 = x.data.reshape(-1, nf)
    n = x2.shape[0]
    gamma, beta = p.gamma.data, p.beta.data

    if training:
        mu = x2.mean(axis=0)
        var = x2.var(axis=0)
        inv = 1.0 / np.sqrt(var + p.epsilon)
        xhat = (x2 - mu) * inv
        m = p.momentum
        unbiased = var * (n / (n - 1)) if n > 1 else var
        p.running_mean = (1.0 - m) * p.running_mean + m * mu
        p.running_var = (1.0 - m) * p.running_var + m * unbiased

        def backward(g):
            g2 = g.reshape(-1, nf)
            dxhat = g2 * gamma
            dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            return dx.reshape(shape), (g2 * xhat).sum(axis=0), g2.sum(axis=0)

    else:
        inv = 1.0 / np.sqrt(p.running_var + p.epsilon)
        xhat = (x2 - p.running_mean) * inv

        def backward(g):
            g2 = g.reshape(-1, nf)
            return (g2 * (gamma * inv)).reshape(shape), (g2 * xhat).sum(axis=0), g2.sum(axis=0)

    y = (xhat * gamma + beta).reshape(shape)
    return record(y, (x, p.gamma, p.beta), backward)


# -- differentiation -------------------------------------------------------


def backward(loss: Tensor) -> dict:
    """Propagate d(loss)/d(.) to every tracked tensor reachable from ``loss``.

    Leaf gradients accumulate across calls, so callers zero them between
    optimizer steps. Intermediate tensors get the gradient of this call.
    Returns ``{leaf: gradient}`` for the leaves reached.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss is not tracked on a tape")
    seed = np.ones(loss.shape)
    if loss.node is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return {loss: seed}
    if not loss.node.valid:
        raise ContractError("backward: the tape holding this loss has been cleared")

    tape = loss.node.tape
    pending = {id(loss): seed}
    leaves: dict[int, list] = {}
    for entry in reversed(tape.entries[: loss.node.index + 1]):
        out = entry.out
        g = pending.pop(id(out), None)
        if g is None:
            out.grad = np.zeros(out.shape)
            continue
        out.grad = g
        for inp, gi in zip(entry.inputs, entry.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                slot = leaves.get(id(inp))
                if slot is None:
                    leaves[id(inp)] = [inp, gi]
                else:
                    slot[1] = slot[1] + gi
            else:
                prev = pending.get(id(inp))
                pending[id(inp)] = gi if prev is None else prev + gi

    result = {}
    for leaf, g in leaves.values():
        leaf.grad = g if leaf.grad is None else leaf.grad + g
        result[leaf] = g
    return result
