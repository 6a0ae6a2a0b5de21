"""Central finite-difference checks of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

STEP = 1e-5
TOLERANCE = 1e-4
# below this magnitude both gradients count as zero and the error is absolute
DENOM_FLOOR = 1e-6


@dataclass
class CheckResult:
    label: str
    worst_name: str
    worst_index: tuple
    analytic: float
    numeric: float
    rel_error: float
    checked: int

    @property
    def ok(self):
        return self.rel_error < TOLERANCE


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), DENOM_FLOOR)
    return np.abs(analytic - numeric) / denom


def numeric_gradient(f, array, h=STEP):
    """d f() / d array by central differences, perturbing ``array`` in place."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def check(loss_fn, params, label="", h=STEP):
    """Compare tape gradients of ``loss_fn()`` against finite differences.

    ``loss_fn`` builds a scalar tensor from ``params`` (a name → Tensor map)
    and must be deterministic; in particular batch norm should run in eval
    mode or the running statistics must not feed back into the loss.
    """
    tape = T.get_tape()
    tape.clear()
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    T.backward(loss)
    analytic = {name: (p.grad if p.grad is not None else np.zeros(p.shape)) for name, p in params.items()}
    tape.clear()

    def f():
        with T.no_grad():
            return loss_fn().item()

    worst = CheckResult(label, "", (), 0.0, 0.0, 0.0, 0)
    checked = 0
    for name, p in params.items():
        num = numeric_gradient(f, p.data, h)
        err = relative_error(analytic[name], num)
        checked += err.size
        idx = np.unravel_index(int(np.argmax(err)), err.shape) if err.size else ()
        if err.size and err[idx] >= worst.rel_error:
            worst = CheckResult(label, name, tuple(int(i) for i in idx), float(analytic[name][idx]),
                                float(num[idx]), float(err[idx]), 0)
    worst.checked = checked
    return worst


TINY = dict(input_size=3, hidden=4, heads=2, window=3, steps=5, batch=2, classes=2, layers=1)
SMALL = dict(input_size=4, hidden=8, heads=4, window=4, steps=6, batch=3, classes=3, layers=2)


def _variants():
    for mode in ("larnn_residual", "larnn_layer"):
        for use_pe in (True, False):
            for lin in (True, False):
                yield dict(mode=mode, use_pe=use_pe, use_linear_activation=lin)
    yield dict(mode="larnn_layer", layer_tanh=True)
    yield dict(mode="larnn_residual", activate_query=True)
    yield dict(mode="bnlstm")
    yield dict(mode="vanilla")


def model_check(dims, seed=0, label=None, **overrides):
    """Gradient check of the full classifier loss for one configuration.

    Parameters are jittered away from their initial values and BN running
    statistics randomized so that no gradient is trivially structured.
    """
    from .model import Model, ModelConfig, cross_entropy, forward_sequence

    d = dict(dims)
    steps, batch = d.pop("steps"), d.pop("batch")
    cfg = ModelConfig(**{**d, **overrides})
    model = Model(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for p in model.named_parameters().values():
        p.data = p.data + rng.normal(0.0, 0.1, p.shape)
    for bn in model.batch_norms().values():
        bn.running_mean = rng.normal(0.0, 0.3, bn.running_mean.shape)
        bn.running_var = rng.uniform(0.5, 2.0, bn.running_var.shape)
    x = T.Tensor(rng.uniform(-2.0, 2.0, (batch, steps, cfg.input_size)))
    labels = rng.integers(0, cfg.classes, batch)
    label = label or ", ".join(f"{k}={v}" for k, v in overrides.items())
    return check(lambda: cross_entropy(forward_sequence(model, x, training=False), labels),
                 model.named_parameters(), label)


def run_suite(tiny=True, seed=0):
    dims = TINY if tiny else SMALL
    return [model_check(dims, seed=seed, **v) for v in _variants()]
