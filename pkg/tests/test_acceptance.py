"""Acceptance gate: one test per criterion, each logging a PASS/FAIL/SKIP line."""

import io
import math
import os
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from larnn import cell
from larnn import tensor as T
from larnn.attention import AttentionParams, attend
from larnn.checkpoint import decode, load_checkpoint, save_checkpoint
from larnn.cli import run
from larnn.data import load_har, synth_task
from larnn.encoding import EncodingSpec, build_encoding
from larnn.errors import FormatError
from larnn.gradcheck import TINY, run_suite
from larnn.model import ModelConfig, forward_sequence
from larnn.sweep import ABLATION_AXES, ablation, summarize
from larnn.trainer import TrainConfig, TrialRecord, train


def _report(number, title, ok, detail):
    status = "PASS" if ok else "FAIL"
    line = f"[{status}] criterion {number}: {title} ({detail})"
    ACCEPTANCE[number] = line
    print(line)
    assert ok, line


def test_1_gradient_fidelity():
    start = time.perf_counter()
    results = run_suite(tiny=True, seed=0)
    elapsed = time.perf_counter() - start
    worst = max(r.rel_error for r in results)
    labels = {r.label for r in results}
    covered = all(any(f"mode={m}, use_pe={pe}, use_linear_activation={lin}" == l for l in labels)
                  for m in ("larnn_residual", "larnn_layer") for pe in (True, False) for lin in (True, False))
    assert TINY == dict(input_size=3, hidden=4, heads=2, window=3, steps=5, batch=2, classes=2, layers=1)
    _report(1, "gradient fidelity", covered and worst < 1e-4 and elapsed < 60,
            f"max rel err {worst:.2e} over {len(results)} configs in {elapsed:.1f}s")


def test_2_attention_invariants():
    rng = np.random.default_rng(2024)
    worst_sum = 0.0
    k1_exact = uniform_exact = True
    for i in range(1000):
        heads = int(rng.choice([1, 2, 4]))
        H = heads * int(rng.integers(1, 4))
        k = int(rng.integers(1, 9))
        F = H + 2 * int(rng.integers(0, 3))
        B = int(rng.integers(1, 4))
        p = AttentionParams.init(rng, 2, H, F, heads, use_linear_activation=bool(rng.integers(2)))
        mem = T.Tensor(rng.normal(0, 3, (B, k, F)))
        _, w = attend(T.Tensor(rng.normal(0, 3, (B, H))), mem, p)
        worst_sum = max(worst_sum, float(np.abs(w.data.sum(-1) - 1.0).max()))
        _, w1 = attend(T.Tensor(rng.normal(0, 3, (B, H))), T.Tensor(rng.normal(size=(B, 1, F))), p)
        k1_exact &= bool(np.all(w1.data == 1.0))
        _, wz = attend(T.Tensor(np.zeros((B, H))), mem, p)
        uniform_exact &= bool(np.allclose(wz.data, 1.0 / k, rtol=0, atol=1e-15))
    _report(2, "attention invariants", worst_sum <= 1e-9 and k1_exact and uniform_exact,
            f"1000 instances, max |sum-1| {worst_sum:.1e}, k=1 exact {k1_exact}, zero query uniform {uniform_exact}")


def test_3_reduction_equivalence():
    rng = np.random.default_rng(3)
    mismatches = 0
    for i in range(100):
        D, H, k = int(rng.integers(1, 5)), 2 * int(rng.integers(1, 5)), int(rng.integers(3, 9))
        base = cell.init_params(i, D, H, mode="bnlstm")
        lar = cell.init_params(i, D, H, window=k, mode="larnn_residual", heads=2)
        lar.W_ac.data[:] = 0.0
        for p in (base, lar):
            for bn in p.bn_gates + [p.bn_cell, p.bn_out]:
                # shared non-trivial running statistics
                bn.running_mean = np.random.default_rng(i).normal(0, 0.3, H)
                bn.running_var = np.random.default_rng(i + 1).uniform(0.5, 2, H)
        B, steps = int(rng.integers(1, 5)), int(rng.integers(1, 8))
        x = rng.normal(size=(B, steps, D))
        sa, sb = cell.initial_state(base, B), cell.initial_state(lar, B)
        for t in range(steps):
            ha, sa = cell.step(base, sa, T.Tensor(x[:, t]), training=False)
            hb, sb = cell.step(lar, sb, T.Tensor(x[:, t]), training=False)
            if not (np.array_equal(ha.data, hb.data) and np.array_equal(sa.c.data, sb.c.data)):
                mismatches += 1
                break
    _report(3, "reduction equivalence", mismatches == 0, f"{100 - mismatches}/100 inputs bitwise equal")


def test_4_positional_encoding_goldens():
    spec = EncodingSpec(128, 8)
    enc = build_encoding(spec)
    row0 = np.array_equal(enc[0], [0, 0, 0, 0, 1, 1, 1, 1])
    lam0 = spec.wavelengths[0] == 512
    bounded = all(np.all(np.abs(build_encoding(EncodingSpec(k, n))) <= 1.0)
                  for k in (3, 8, 32, 128, 1000) for n in (2, 4, 8))
    ratios = all(a == 2 * b for a, b in zip(spec.wavelengths, spec.wavelengths[1:]))
    _report(4, "positional encoding goldens", row0 and lam0 and bounded and ratios,
            f"row0 {row0}, lambda0 {spec.wavelengths[0]}, bounded {bounded}, ratio-2 {ratios}")


LONG_SUM = dict(n_train=6000, n_test=2000, steps=64, data_seed=0)
SMOKE_TRAIN = dict(lr=3e-3, batch_size=32, epochs=10, seed=0)


def _long_sum_run(mode):
    ds = synth_task("long-sum", LONG_SUM["n_train"] + LONG_SUM["n_test"], LONG_SUM["steps"],
                    LONG_SUM["data_seed"])
    tr, te = ds.split(LONG_SUM["n_train"])
    mc = ModelConfig(input_size=1, classes=2, hidden=16, window=8, heads=8, mode=mode, layers=1)
    start = time.perf_counter()
    _, _, rec = train(TrainConfig(model=mc, **SMOKE_TRAIN), tr, te)
    return rec, time.perf_counter() - start


@pytest.mark.slow
def test_5_learning_smoke():
    baseline, base_time = _long_sum_run("bnlstm")
    rec, elapsed = _long_sum_run("larnn_residual")
    ok = (not baseline.diverged and baseline.final_test_acc >= 0.90
          and not rec.diverged and rec.final_test_acc >= 0.95 and elapsed < 600)
    _report(5, "learning smoke (long-sum)", ok,
            f"BN-LSTM oracle {baseline.final_test_acc:.4f} in {base_time:.0f}s; "
            f"LARNN-residual {rec.final_test_acc:.4f} in {elapsed:.0f}s")


@pytest.mark.slow
@pytest.mark.har
def test_6_har_smoke():
    root = os.environ.get("LARNN_DATA_DIR")
    if not root or not os.path.isdir(os.path.join(root, "train")):
        ACCEPTANCE[6] = "[SKIP] criterion 6: HAR smoke (LARNN_DATA_DIR does not point at the UCI HAR dataset)"
        print(ACCEPTANCE[6])
        pytest.skip("UCI HAR dataset not available; set LARNN_DATA_DIR")
    tr = load_har(root, "train")
    te = load_har(root, "test", normalization=tr.normalization)
    cfg = TrainConfig(epochs=25, model=ModelConfig())
    _, _, rec = train(cfg, tr, te)
    _report(6, "HAR smoke", not rec.diverged and rec.final_test_acc >= 0.85,
            f"test accuracy {rec.final_test_acc:.4f} after 25 epochs; unscaled reference 0.91924")


def test_7_ablation_harness(tmp_path):
    ds = synth_task("long-sum", 600, 16, seed=7)
    tr, te = ds.split(400)
    base = TrainConfig(lr=3e-3, batch_size=32, epochs=2,
                       model=ModelConfig(input_size=1, classes=2, hidden=8, window=4, heads=4, layers=1))
    log = tmp_path / "ablation.jsonl"
    records = ablation(tr, te, base, ABLATION_AXES, seeds=(0, 1, 2), log_path=log)
    lines = log.read_text().splitlines()
    parsed = [TrialRecord.from_json(l) for l in lines]
    report, text = summarize(parsed)
    cells = report["cells"]
    complete = len(lines) == 24 and all(len(r.epochs) == 2 for r in parsed)
    per_cell = len(cells) == 8 and all(c["trials"] == 3 for c in cells)
    flagged = sum(c["best"] for c in cells) == 1 and "<- best" in text
    stated = all("expectation" in report["per_axis"][n] for n in ("use_pe", "use_linear_activation"))
    _report(7, "ablation harness", complete and per_cell and flagged and stated and len(records) == 24,
            f"{len(lines)} log lines, {len(cells)} cells, winner flagged {flagged}, expectations stated {stated}")


def test_8_serialization(tmp_path):
    tr, te = synth_task("adding", 48, 6, 0).split(32)
    mc = ModelConfig(input_size=2, classes=2, hidden=6, window=4, heads=3, layers=2)
    model, opt, _ = train(TrainConfig(lr=0.01, epochs=1, batch_size=8, model=mc), tr, te)
    path = tmp_path / "m.ckpt"
    first = save_checkpoint(model, opt, path)
    loaded, lopt = load_checkpoint(path)
    second = save_checkpoint(loaded, lopt)
    same_bytes = first == second
    same_logits = np.array_equal(forward_sequence(model, te.x).data, forward_sequence(loaded, te.x).data)
    try:
        decode(b"XXXX" + first[4:])
        rejected = False
    except FormatError:
        rejected = True
    _report(8, "serialization", same_bytes and same_logits and rejected,
            f"bytes identical {same_bytes}, logits identical {same_logits}, bad magic rejected {rejected}")


def test_9_determinism(tmp_path):
    argv = ["train", "--synth", "long-sum", "--n-train", "200", "--n-test", "100", "--seq-len", "16",
            "--hidden", "8", "--window", "4", "--layers", "2", "--epochs", "2", "--batch-size", "16",
            "--lr", "0.003", "--seed", "11"]
    csvs = []
    for name in ("a", "b"):
        code = run(argv + ["--out", str(tmp_path / name)], io.StringIO())
        assert code == 0
        csvs.append((tmp_path / name / "metrics.csv").read_bytes())
    same = csvs[0] == csvs[1]
    rows = len(csvs[0].splitlines()) - 1
    _report(9, "determinism", same and rows == 2, f"metrics CSVs identical {same}, {rows} epochs")
