"""Adam training loop with global-norm clipping and per-epoch metrics."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .data import Dataset, batches
from .errors import ContractError, DimensionError, NumericError
from .model import Model, ModelConfig, accuracy, cross_entropy, forward_sequence

EVAL_BATCH = 512


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip: float = 5.0
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if not self.lr >= 0:
            raise ContractError(f"learning rate must be >= 0, got {self.lr}")
        if not self.clip > 0:
            raise ContractError(f"clip norm must be > 0, got {self.clip}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ContractError(f"Adam betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        model = ModelConfig.from_dict(d.pop("model", {}))
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ContractError(f"unknown train config keys: {sorted(unknown)}")
        return cls(model=model, **d)


class Adam:
    """Bias-corrected Adam over a name → Tensor parameter map."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros(p.shape) for k, p in params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in params.items()}

    def step(self, grads=None):
        """Apply one update; ``grads`` defaults to each parameter's ``.grad``."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = grads[k] if grads is not None else p.grad
            if g is None:
                g = np.zeros(p.shape)
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * (g * g)
            m_hat = self.m[k] / c1
            v_hat = self.v[k] / c2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_global_norm(params, max_norm):
    """Rescale ``.grad`` of every parameter so their joint L2 norm is <= max_norm.

    Returns the norm before clipping.
    """
    grads = [p.grad for p in params.values() if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        s = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * s
    return norm


@dataclass
class TrialRecord:
    trial_id: str
    config: dict
    epochs: list = field(default_factory=list)  # dicts: epoch, train_loss, train_acc, test_acc
    wall_time: float = 0.0
    final_test_acc: float = float("nan")
    best_test_acc: float = float("nan")
    diverged: bool = False
    early_stopped: bool = False
    round: int = 0

    def to_json(self):
        d = asdict(self)
        return json.dumps(_json_safe(d), sort_keys=True)

    @classmethod
    def from_json(cls, line):
        return cls(**json.loads(line))

    def metrics_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "train_acc", "test_acc"])
        for e in self.epochs:
            w.writerow([e["epoch"], repr(e["train_loss"]), repr(e["train_acc"]), repr(e["test_acc"])])
        return buf.getvalue()


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_json_safe(v) for v in obj]
    return obj


def evaluate(model: Model, ds: Dataset, batch_size=EVAL_BATCH, attention_log=None):
    """Eval-mode ``(accuracy, mean loss)`` over ``ds``.

    ``attention_log``, when a list, receives ``(first_sample, layer, t, weights)``.
    """
    if len(ds) == 0:
        return float("nan"), float("nan")
    correct = 0.0
    loss = 0.0
    offset = 0
    with T.no_grad():
        for x, y in batches(ds, batch_size):
            step_log = [] if attention_log is not None else None
            logits = forward_sequence(model, x, training=False, attention_log=step_log)
            if step_log:
                attention_log.extend((offset, layer, t, w) for layer, t, w in step_log)
            offset += len(y)
            correct += accuracy(logits, y) * len(y)
            loss += cross_entropy(logits, y).item() * len(y)
    return correct / len(ds), loss / len(ds)


def train_epoch(model, opt, ds, cfg: TrainConfig, epoch):
    tape = T.get_tape()
    params = opt.params
    total_loss = 0.0
    correct = 0.0
    for x, y in batches(ds, cfg.batch_size, shuffle_seed=cfg.seed * 100003 + epoch):
        tape.clear()
        model.zero_grad()
        logits = forward_sequence(model, x, training=True)
        loss = cross_entropy(logits, y)
        if not math.isfinite(loss.item()):
            tape.clear()
            raise NumericError(f"non-finite loss in epoch {epoch}")
        T.backward(loss)
        tape.clear()
        clip_global_norm(params, cfg.clip)
        opt.step()
        total_loss += loss.item() * len(y)
        correct += accuracy(logits, y) * len(y)
    return total_loss / len(ds), correct / len(ds)


def train(cfg: TrainConfig, train_ds: Dataset, test_ds: Dataset, trial_id="train", model=None,
          optimizer=None, progress=None):
    """Train for ``cfg.epochs`` epochs; returns ``(model, optimizer, record)``.

    A non-finite loss ends the trial with ``record.diverged`` set.
    ``progress`` is called with each epoch's metrics dict.
    """
    mc = cfg.model
    for ds in (train_ds, test_ds):
        if ds.input_size != mc.input_size or ds.classes != mc.classes:
            raise DimensionError(
                f"dataset has D={ds.input_size}, C={ds.classes}; model expects "
                f"D={mc.input_size}, C={mc.classes}")
    model = model or Model(mc, seed=cfg.seed)
    opt = optimizer or Adam(model.named_parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    record = TrialRecord(trial_id, cfg.to_dict())
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        try:
            train_loss, train_acc = train_epoch(model, opt, train_ds, cfg, epoch)
        except NumericError:
            record.diverged = True
            break
        test_acc, _ = evaluate(model, test_ds)
        metrics = {"epoch": epoch, "train_loss": train_loss, "train_acc": train_acc, "test_acc": test_acc}
        record.epochs.append(metrics)
        if progress is not None:
            progress(metrics)
    record.wall_time = time.perf_counter() - start
    accs = [e["test_acc"] for e in record.epochs]
    if accs:
        record.final_test_acc = accs[-1]
        record.best_test_acc = max(accs)
    return model, opt, record
