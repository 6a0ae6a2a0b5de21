import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from larnn.data import synth_task
from larnn.errors import ContractError
from larnn.model import ModelConfig
from larnn.sweep import (DEFAULT_SPACE, ablation, apply_overrides, narrow, round_epochs, sample, summarize,
                         sweep, validate_space)
from larnn.trainer import TrainConfig, TrialRecord

BASE = TrainConfig(lr=0.01, epochs=1, batch_size=8,
                   model=ModelConfig(input_size=2, classes=2, hidden=4, window=4, heads=2, layers=1))
TINY_SPACE = {"mode": {"choice": ["larnn_residual", "larnn_layer"]}, "lr": {"loguniform": [1e-3, 1e-1]}}


@pytest.fixture(scope="module")
def tiny_data():
    return synth_task("adding", 20, 4, 0).split(12)


def _within(value, dom):
    kind, vals = next(iter(dom.items()))
    if kind == "choice":
        return value in vals
    return vals[0] <= value <= vals[1]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_samples_and_narrowing_stay_inside(seed):
    rng = np.random.default_rng(seed)
    s = sample(DEFAULT_SPACE, rng)
    assert all(_within(s[k], d) for k, d in DEFAULT_SPACE.items())
    child = narrow(DEFAULT_SPACE, s)
    for k, dom in child.items():
        kind, vals = next(iter(dom.items()))
        parent = DEFAULT_SPACE[k][kind]
        if kind == "choice":
            assert set(vals) <= set(parent) and s[k] in vals
        else:
            assert parent[0] <= vals[0] <= vals[1] <= parent[1]
            assert vals[0] <= s[k] * (1 + 1e-12) and s[k] <= vals[1] * (1 + 1e-12)
            assert math.log(vals[1] / vals[0]) <= 0.5 * math.log(parent[1] / parent[0]) + 1e-9


def test_space_validation():
    validate_space(DEFAULT_SPACE)
    for bad in ({"colour": {"choice": [1]}}, {"lr": {"normal": [0, 1]}}, {"lr": {"loguniform": [0, 1]}},
                {"lr": {"uniform": [2, 1]}}, {"layers": {"choice": []}}):
        with pytest.raises(ContractError):
            validate_space(bad)


def test_overrides_and_heads_rule():
    cfg = apply_overrides(BASE, {"hidden": 8, "lr": 0.5, "mode": "bnlstm"})
    assert cfg.model.hidden == 8 and cfg.model.heads == 4 and cfg.lr == 0.5 and cfg.model.mode == "bnlstm"


def test_round_epochs():
    assert [round_epochs(2, r) for r in (1, 2, 3)] == [2, 8, 32]
    assert [round_epochs([1, 5], r) for r in (1, 2, 3)] == [1, 5, 5]


def test_sweep_deterministic_with_log(tiny_data, tmp_path):
    tr, te = tiny_data
    log = tmp_path / "trials.jsonl"
    r1, spaces = sweep(TINY_SPACE, 2, 2, 7, [1, 1], tr, te, base=BASE, log_path=log)
    lines = log.read_text().splitlines()
    assert len(lines) == 4
    assert [TrialRecord.from_json(l).trial_id for l in lines] == [r.trial_id for r in r1]
    assert [r.round for r in r1] == [1, 1, 2, 2]
    assert set(spaces[1]["mode"]["choice"]) <= set(TINY_SPACE["mode"]["choice"])
    r2, _ = sweep(TINY_SPACE, 2, 2, 7, [1, 1], tr, te, base=BASE)
    assert [r.epochs for r in r1] == [r.epochs for r in r2]
    assert [r.config for r in r1] == [r.config for r in r2]


def test_parallel_matches_serial(tiny_data):
    tr, te = tiny_data
    serial, _ = sweep(TINY_SPACE, 1, 2, 3, 1, tr, te, base=BASE)
    parallel, _ = sweep(TINY_SPACE, 1, 2, 3, 1, tr, te, base=BASE, jobs=2)
    assert [r.epochs for r in serial] == [r.epochs for r in parallel]


def test_invalid_trial_is_recorded_not_raised(tiny_data):
    tr, te = tiny_data
    recs, _ = sweep({"hidden": {"choice": [5]}, "heads": {"choice": [2]}}, 1, 1, 0, 1, tr, te, base=BASE)
    assert recs[0].diverged and "divisible" in recs[0].config["error"]


def test_ablation_grid_and_summary(tiny_data, tmp_path):
    tr, te = tiny_data
    axes = {"use_pe": [True, False], "mode": ["larnn_residual", "larnn_layer"]}
    recs = ablation(tr, te, BASE, axes, seeds=(0, 1), log_path=tmp_path / "g.jsonl")
    assert len(recs) == 8
    assert len((tmp_path / "g.jsonl").read_text().splitlines()) == 8
    report, text = summarize(recs, axes)
    assert set(report["per_axis"]) == {"mode", "use_pe"}
    pe = report["per_axis"]["use_pe"]
    assert pe["expected"] is False and "agrees" in pe
    assert sum(c["best"] for c in report["cells"]) == 1
    assert "<- best" in text
    json.dumps(report, default=str)


def test_summary_picks_known_winner():
    def rec(mode, pe, acc):
        return TrialRecord("x", {"overrides": {"mode": mode, "use_pe": pe}},
                           [{"epoch": 1, "train_loss": 0, "train_acc": 0, "test_acc": acc}], final_test_acc=acc)

    recs = [rec("larnn_residual", False, 0.9), rec("larnn_residual", True, 0.8),
            rec("larnn_layer", False, 0.7), rec("larnn_layer", True, 0.6)]
    report, _ = summarize(recs, {"mode": ["larnn_residual", "larnn_layer"], "use_pe": [True, False]})
    axes = report["per_axis"]
    assert axes["mode"]["winner"] == "larnn_residual" and axes["mode"]["agrees"]
    assert axes["use_pe"]["winner"] is False and axes["use_pe"]["agrees"]
