"""Stacked recurrent classifier reading out at the last time step."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import cell as cells
from . import tensor as T
from .encoding import DEFAULT_N_PE
from .errors import ContractError, DimensionError

STACKINGS = ("residual", "plain")


@dataclass
class ModelConfig:
    input_size: int = 9
    classes: int = 6
    hidden: int = 42
    window: int = 32
    heads: int = 21
    mode: str = "larnn_residual"
    layers: int = 2
    stacking: str = "residual"
    use_pe: bool = True
    n_pe: int = DEFAULT_N_PE
    use_linear_activation: bool = True
    layer_tanh: bool = False
    activate_query: bool = False

    def __post_init__(self):
        if self.mode not in cells.MODES:
            raise ContractError(f"unknown mode {self.mode!r}; expected one of {cells.MODES}")
        if self.stacking not in STACKINGS:
            raise ContractError(f"unknown stacking {self.stacking!r}")
        if self.layers not in (1, 2, 3):
            raise ContractError(f"layers must be 1, 2 or 3, got {self.layers}")
        if self.heads < 1 or self.hidden % self.heads:
            raise ContractError(f"hidden {self.hidden} is not divisible by heads {self.heads}")
        if min(self.input_size, self.classes, self.hidden) < 1:
            raise ContractError("input_size, classes and hidden must be positive")
        if self.mode.startswith("larnn") and self.window < 1:
            raise ContractError(f"LARNN modes need window >= 1, got {self.window}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ContractError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class Model:
    def __init__(self, config: ModelConfig, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        self.cells = [
            cells.init_params(
                rng, c.input_size if layer == 0 else c.hidden, c.hidden, c.window, c.mode,
                heads=c.heads, n_pe=c.n_pe, use_pe=c.use_pe,
                use_linear_activation=c.use_linear_activation, layer_tanh=c.layer_tanh,
                activate_query=c.activate_query, prefix=f"layer{layer}.",
            )
            for layer in range(c.layers)
        ]
        bound = 1.0 / math.sqrt(c.hidden)
        self.W_out = T.parameter(rng.uniform(-bound, bound, (c.hidden, c.classes)), name="out.W")
        self.b_out = T.parameter(np.zeros(c.classes), name="out.b")

    def named_parameters(self):
        out = {}
        for layer, p in enumerate(self.cells):
            out.update(p.named_parameters(prefix=f"layer{layer}."))
        out["out.W"] = self.W_out
        out["out.b"] = self.b_out
        return out

    def batch_norms(self):
        out = {}
        for layer, p in enumerate(self.cells):
            for name, bn in p.batch_norms().items():
                out[f"layer{layer}.{name}"] = bn
        return out

    def parameter_count(self):
        return sum(t.data.size for t in self.named_parameters().values())

    def zero_grad(self):
        for t in self.named_parameters().values():
            t.grad = None

    def forward(self, x, training=False, attention_log=None):
        return forward_sequence(self, x, training, attention_log)


def forward_sequence(model: Model, x, training=False, attention_log=None) -> T.Tensor:
    """Run the stack over a B×T×D batch and return B×C logits.

    With residual stacking the classifier reads the sum of every layer's
    final hidden state; with plain stacking only the top layer's. When
    ``attention_log`` is a list, ``(layer, t, weights)`` triples are appended
    for every LARNN step.
    """
    cfg = model.config
    x = T.as_tensor(x)
    if x.ndim != 3 or x.shape[2] != cfg.input_size:
        raise DimensionError(f"forward: input {x.shape} vs input size {cfg.input_size}")
    B, steps, _ = x.shape
    if steps < 1:
        raise ContractError("forward: sequence must have at least one step")
    states = [cells.initial_state(p, B) for p in model.cells]
    for t in range(steps):
        inp = T.select(x, t, axis=1)
        for layer, p in enumerate(model.cells):
            inp, states[layer] = cells.step(p, states[layer], inp, training)
            if attention_log is not None and states[layer].weights is not None:
                attention_log.append((layer, t, states[layer].weights.data))
    if cfg.stacking == "residual" and len(states) > 1:
        top = T.add_many([s.h for s in states])
    else:
        top = states[-1].h
    return T.add(T.matmul(top, model.W_out), model.b_out)


def cross_entropy(logits: T.Tensor, labels) -> T.Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    B, C = logits.shape
    if labels.shape != (B,):
        raise DimensionError(f"cross_entropy: labels {labels.shape} vs logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ContractError(f"cross_entropy: labels must lie in [0, {C})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (float(g) / B),)

    return T.record(np.array(loss), (logits,), backward)


def predict(logits) -> np.ndarray:
    """Argmax per row; ties resolve to the lowest class index."""
    data = logits.data if isinstance(logits, T.Tensor) else np.asarray(logits)
    return np.argmax(data, axis=1)


def accuracy(logits, labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0.0
    return float(np.mean(predict(logits) == labels))
