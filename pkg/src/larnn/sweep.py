"""Two-round random search and grid ablations over training configs.

A search space maps hyperparameter names to one of::

    {"choice": [v0, v1, ...]}      ordered grid, narrowed to the best value ±1 step
    {"loguniform": [low, high]}    narrowed to half the log-range around the best value
    {"uniform": [low, high]}       narrowed to half the range around the best value

Names are :class:`ModelConfig` or :class:`TrainConfig` fields. When ``heads``
is not part of the space it follows ``hidden // 2``.
"""

from __future__ import annotations

import copy
import itertools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields, replace
from statistics import mean

import numpy as np

from .errors import ContractError
from .fileio import atomic_write_text
from .model import ModelConfig
from .trainer import TrainConfig, TrialRecord, train

DEFAULT_SPACE = {
    "mode": {"choice": ["larnn_residual", "larnn_layer"]},
    "use_pe": {"choice": [True, False]},
    "use_linear_activation": {"choice": [True, False]},
    "layers": {"choice": [1, 2, 3]},
    "window": {"choice": [8, 16, 32, 64]},
    "hidden": {"choice": [32, 42, 64]},
    "lr": {"loguniform": [1e-4, 1e-2]},
}

ABLATION_AXES = {
    "mode": ["larnn_residual", "larnn_layer"],
    "use_pe": [True, False],
    "use_linear_activation": [True, False],
}

# directional outcomes expected on HAR; reported, never asserted
EXPECTATIONS = {
    "use_pe": (False, "positional encoding not expected to help"),
    "use_linear_activation": (True, "BN-ELU on key/value maps expected to help"),
    "mode": ("larnn_residual", "residual mode expected to beat layer mode"),
}

_MODEL_FIELDS = {f.name for f in fields(ModelConfig)}
_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)} - {"model"}
_KINDS = ("choice", "loguniform", "uniform")


def validate_space(space):
    for name, dom in space.items():
        if name not in _MODEL_FIELDS | _TRAIN_FIELDS:
            raise ContractError(f"unknown hyperparameter {name!r}")
        if not isinstance(dom, dict) or len(dom) != 1 or next(iter(dom)) not in _KINDS:
            raise ContractError(f"{name}: domain must be one of {_KINDS}, got {dom!r}")
        kind, vals = next(iter(dom.items()))
        if kind == "choice":
            if not vals:
                raise ContractError(f"{name}: empty choice list")
        elif len(vals) != 2 or not vals[0] <= vals[1] or (kind == "loguniform" and vals[0] <= 0):
            raise ContractError(f"{name}: bad {kind} range {vals!r}")
    return space


def load_space(path):
    with open(path) as f:
        return validate_space(json.load(f))


def sample(space, rng):
    out = {}
    for name in sorted(space):
        kind, vals = next(iter(space[name].items()))
        if kind == "choice":
            out[name] = vals[int(rng.integers(len(vals)))]
        elif kind == "uniform":
            out[name] = float(rng.uniform(vals[0], vals[1]))
        else:
            out[name] = float(math.exp(rng.uniform(math.log(vals[0]), math.log(vals[1]))))
    return out


def narrow(space, best):
    """Shrink every domain around the values in ``best``; result is a subset."""
    out = {}
    for name, dom in space.items():
        kind, vals = next(iter(dom.items()))
        v = best[name]
        if kind == "choice":
            i = vals.index(v)
            out[name] = {"choice": vals[max(0, i - 1): i + 2]}
            continue
        to = (lambda a: math.log(a)) if kind == "loguniform" else (lambda a: a)
        back = (lambda a: math.exp(a)) if kind == "loguniform" else (lambda a: a)
        lo, hi = to(vals[0]), to(vals[1])
        half = (hi - lo) / 4
        c = min(max(to(v), lo + half), hi - half)
        new = [back(c - half), back(c + half)]
        # keep within the parent range despite exp/log rounding
        out[name] = {kind: [max(new[0], vals[0]), min(new[1], vals[1])]}
    return out


def apply_overrides(base: TrainConfig, overrides) -> TrainConfig:
    model_kw = {k: v for k, v in overrides.items() if k in _MODEL_FIELDS}
    train_kw = {k: v for k, v in overrides.items() if k in _TRAIN_FIELDS}
    if "hidden" in model_kw and "heads" not in overrides:
        model_kw["heads"] = max(1, model_kw["hidden"] // 2)
    return replace(base, model=replace(base.model, **model_kw), **train_kw)


def _run_trial(args):
    trial_id, base, overrides, train_ds, test_ds, round_no = args
    try:
        cfg = apply_overrides(base, overrides)
        _, _, record = train(cfg, train_ds, test_ds, trial_id=trial_id)
    except ContractError as exc:
        # an invalid combination counts as a failed trial rather than aborting the search
        record = TrialRecord(trial_id, base.to_dict(), diverged=True)
        record.config["error"] = str(exc)
    record.config["overrides"] = overrides
    record.round = round_no
    return record


class TrialLog:
    """Single writer for the JSON-lines trial log; rewrites the file atomically per trial."""

    def __init__(self, path):
        self.path = path
        self.lines = []
        if path is not None:
            atomic_write_text(path, "")

    def append(self, record: TrialRecord):
        self.lines.append(record.to_json() + "\n")
        if self.path is not None:
            atomic_write_text(self.path, "".join(self.lines))


def _execute(jobs_args, jobs, log):
    records = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for rec in pool.map(_run_trial, jobs_args):
                log.append(rec)
                records.append(rec)
    else:
        for args in jobs_args:
            rec = _run_trial(args)
            log.append(rec)
            records.append(rec)
    return records


def round_epochs(budget_epochs, round_no):
    if isinstance(budget_epochs, (list, tuple)):
        return budget_epochs[min(round_no, len(budget_epochs)) - 1]
    return budget_epochs * 4 ** (round_no - 1)


def _score(rec):
    return -1.0 if rec.diverged or not rec.epochs else rec.best_test_acc


def sweep(space, rounds, trials_per_round, seed, budget_epochs, train_ds, test_ds,
          base: TrainConfig = None, log_path=None, jobs=1):
    """Diffuse-then-focused random search.

    Round 1 samples the full space; each later round samples a space narrowed
    around the best trial so far and trains for longer (``budget_epochs``
    is either one value per round or a base multiplied by 4 each round).
    Returns every :class:`TrialRecord`; diverged trials are kept.
    """
    validate_space(space)
    base = base or TrainConfig()
    rng = np.random.default_rng(seed)
    log = TrialLog(log_path)
    records, spaces = [], []
    current = copy.deepcopy(space)
    for round_no in range(1, rounds + 1):
        if round_no > 1:
            best = max(records, key=_score)
            current = narrow(current, best.config["overrides"])
        spaces.append(current)
        epochs = round_epochs(budget_epochs, round_no)
        args = []
        for i in range(trials_per_round):
            overrides = sample(current, rng)
            trial_seed = int(rng.integers(2**31))
            cfg = replace(base, epochs=epochs, seed=trial_seed)
            args.append((f"r{round_no}-t{i:03d}", cfg, overrides, train_ds, test_ds, round_no))
        records.extend(_execute(args, jobs, log))
    return records, spaces


def ablation(train_ds, test_ds, base: TrainConfig = None, axes=None, seeds=(0, 1, 2),
             log_path=None, jobs=1):
    """Full grid over ``axes`` (name → values) repeated for every seed."""
    base = base or TrainConfig()
    axes = axes or ABLATION_AXES
    names = sorted(axes)
    log = TrialLog(log_path)
    args = []
    for values in itertools.product(*(axes[n] for n in names)):
        overrides = dict(zip(names, values))
        for s in seeds:
            cfg = replace(base, seed=s)
            tag = "-".join(f"{n}={v}" for n, v in overrides.items())
            args.append((f"grid-{tag}-seed{s}", cfg, overrides, train_ds, test_ds, 0))
    return _execute(args, jobs, log)


def summarize(records, axes=None):
    """Mean final accuracy per grid cell and per axis value, winners flagged.

    Returns ``(report_dict, text)``.
    """
    axes = axes or ABLATION_AXES
    names = sorted(axes)
    cells = {}
    for rec in records:
        ov = rec.config["overrides"]
        key = tuple(ov[n] for n in names)
        acc = 0.0 if rec.diverged or not rec.epochs else rec.final_test_acc
        cells.setdefault(key, []).append(acc)
    cell_means = {k: mean(v) for k, v in cells.items()}
    best_cell = max(cell_means, key=cell_means.get)

    lines = ["cell (" + ", ".join(names) + ")  mean_test_acc  n"]
    for key in sorted(cell_means, key=lambda k: -cell_means[k]):
        flag = "  <- best" if key == best_cell else ""
        lines.append(f"{key}  {cell_means[key]:.4f}  {len(cells[key])}{flag}")

    axis_report = {}
    for i, n in enumerate(names):
        per_value = {}
        for key, accs in cells.items():
            per_value.setdefault(key[i], []).extend(accs)
        means = {v: mean(a) for v, a in per_value.items()}
        winner = max(means, key=means.get)
        entry = {"means": {str(v): m for v, m in means.items()}, "winner": winner}
        if n in EXPECTATIONS:
            expected, text = EXPECTATIONS[n]
            entry["expected"] = expected
            entry["agrees"] = winner == expected
            entry["expectation"] = text
        axis_report[n] = entry
        parts = ", ".join(f"{v}={m:.4f}" for v, m in means.items())
        line = f"{n}: {parts}; winner={winner}"
        if "expected" in entry:
            verdict = "agrees" if entry["agrees"] else "disagrees"
            line += f" ({verdict} with non-binding expectation: {entry['expectation']})"
        lines.append(line)

    report = {
        "axes": names,
        "cells": [{"setting": dict(zip(names, k)), "mean_test_acc": cell_means[k],
                   "trials": len(cells[k]), "best": k == best_cell} for k in cell_means],
        "per_axis": axis_report,
    }
    return report, "\n".join(lines)
