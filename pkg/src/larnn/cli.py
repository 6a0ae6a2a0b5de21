"""Command-line entry point: ``larnn <subcommand> [flags]``.

Exit status is 0 on success, 1 on runtime or numeric failure and 2 on usage
errors. ``--config FILE`` supplies ``key=value`` lines (keys are flag names
without the leading dashes) that act as defaults beneath explicit flags.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import gradcheck
from .checkpoint import load_checkpoint, save_checkpoint
from .data import SYNTH_KINDS, data_dir_default, load_har, synth_task
from .encoding import EncodingSpec, build_encoding
from .errors import LarnnError
from .fileio import atomic_write_bytes, atomic_write_text
from .model import ModelConfig
from .sweep import ABLATION_AXES, DEFAULT_SPACE, ablation, load_space, summarize, sweep
from .trainer import TrainConfig, evaluate, train

MODE_ALIASES = {"residual": "larnn_residual", "layer": "larnn_layer"}
MODES = ("vanilla", "bnlstm", "larnn_residual", "larnn_layer", "residual", "layer")


class UsageError(Exception):
    pass


def _add_data_flags(p):
    g = p.add_argument_group("data")
    g.add_argument("--data", default=data_dir_default(),
                   help="UCI HAR root directory (default: $LARNN_DATA_DIR)")
    g.add_argument("--synth", choices=SYNTH_KINDS, help="use a synthetic task instead of --data")
    g.add_argument("--n-train", type=int, default=6000, help="synthetic training samples (default 6000)")
    g.add_argument("--n-test", type=int, default=2000, help="synthetic test samples (default 2000)")
    g.add_argument("--seq-len", type=int, default=64, help="synthetic sequence length (default 64)")
    g.add_argument("--data-seed", type=int, default=0, help="synthetic generator seed (default 0)")


def _add_model_flags(p):
    g = p.add_argument_group("model")
    g.add_argument("--mode", choices=MODES, default="larnn_residual", help="cell type (default larnn_residual)")
    g.add_argument("--hidden", type=int, default=42, help="hidden size H (default 42)")
    g.add_argument("--window", type=int, default=32, help="attention window k (default 32)")
    g.add_argument("--heads", type=int, default=None, help="attention heads (default H/2)")
    g.add_argument("--layers", type=int, default=2, choices=(1, 2, 3), help="stacked cells (default 2)")
    g.add_argument("--stacking", choices=("residual", "plain"), default="residual",
                   help="classifier input: sum of layers or top layer (default residual)")
    g.add_argument("--no-pe", action="store_true", help="disable positional encoding")
    g.add_argument("--n-pe", type=int, default=8, help="positional encoding channels (default 8)")
    g.add_argument("--no-linear-activation", action="store_true",
                   help="skip BN-ELU on attention key/value maps")
    g.add_argument("--layer-tanh", action="store_true", help="wrap layer-mode candidate in tanh")
    g.add_argument("--activate-query", action="store_true", help="BN-ELU on the attention query too")


def _add_train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=10, help="training epochs (default 10)")
    g.add_argument("--batch-size", type=int, default=64, help="mini-batch size (default 64)")
    g.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate (default 1e-3)")
    g.add_argument("--beta1", type=float, default=0.9, help="Adam beta1 (default 0.9)")
    g.add_argument("--beta2", type=float, default=0.999, help="Adam beta2 (default 0.999)")
    g.add_argument("--adam-eps", type=float, default=1e-8, help="Adam epsilon (default 1e-8)")
    g.add_argument("--clip", type=float, default=5.0, help="global gradient-norm clip (default 5.0)")
    g.add_argument("--seed", type=int, default=0, help="initialization and shuffling seed (default 0)")


def build_parser():
    parser = argparse.ArgumentParser(prog="larnn", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="key=value defaults file applied before flags")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("train", help="train a model, write checkpoint and metrics CSV")
    _add_data_flags(p)
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--out", default="run", help="output directory (default ./run)")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    _add_data_flags(p)
    p.add_argument("--batch-size", type=int, default=512, help="evaluation batch size (default 512)")
    p.add_argument("--dump-attention", metavar="CSV", help="write attention weights as CSV")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--tiny-config", action="store_true", help="D=3, H=4, heads=2, k=3, T=5, B=2, C=2")
    p.add_argument("--seed", type=int, default=0, help="seed for parameters and inputs (default 0)")

    p = sub.add_parser("pe-dump", help="write the positional encoding as CSV and PGM")
    p.add_argument("--window", type=int, default=128, help="window k (default 128)")
    p.add_argument("--n-pe", type=int, default=8, help="encoding channels (default 8)")
    p.add_argument("--csv", help="CSV output path")
    p.add_argument("--pgm", help="8-bit PGM heatmap output path")

    p = sub.add_parser("sweep", help="two-round random search or --grid ablation")
    p.add_argument("--space", help="JSON search space (default: built-in space)")
    p.add_argument("--rounds", type=int, default=2, help="search rounds (default 2)")
    p.add_argument("--trials", type=int, default=8, help="trials per round (default 8)")
    p.add_argument("--log", default="trials.jsonl", help="JSON-lines trial log (default trials.jsonl)")
    p.add_argument("--jobs", type=int, default=1, help="parallel trials (default 1)")
    p.add_argument("--grid", action="store_true",
                   help="ablation grid over the space's choice axes instead of random search")
    p.add_argument("--seeds", type=int, default=3, help="seeds per grid cell (default 3)")
    p.add_argument("--report", help="write the ablation summary as JSON")
    _add_data_flags(p)
    _add_model_flags(p)
    _add_train_flags(p)

    p = sub.add_parser("synth", help="export a synthetic dataset as CSV")
    p.add_argument("--kind", choices=SYNTH_KINDS, default="adding", help="task (default adding)")
    p.add_argument("--n", type=int, default=10000, help="samples (default 10000)")
    p.add_argument("--seq-len", type=int, default=128, help="sequence length (default 128)")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    p.add_argument("--out", required=True, help="CSV output path")
    return parser


def _parse_bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices.get(name)
    return None


def _config_defaults(path, subparser):
    """Turn key=value lines into parser defaults, rejecting unknown keys."""
    actions = {a.dest: a for a in subparser._actions}
    defaults = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            dest = key.lstrip("-").replace("-", "_")
            action = actions.get(dest)
            if action is None or dest == "help":
                raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
            if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
                defaults[dest] = _parse_bool(value)
            else:
                try:
                    defaults[dest] = action.type(value) if action.type else value
                except ValueError:
                    raise UsageError(f"{path}:{lineno}: bad value for {key}: {value!r}") from None
                if action.choices is not None and defaults[dest] not in action.choices:
                    raise UsageError(f"{path}:{lineno}: {key} must be one of {list(action.choices)}")
    return defaults


def parse_args(argv):
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    if known.config:
        command = next((a for a in rest if not a.startswith("-")), None)
        sub = _subparser(parser, command)
        if sub is not None:
            try:
                sub.set_defaults(**_config_defaults(known.config, sub))
            except (UsageError, OSError) as exc:
                parser.error(str(exc))
    return parser, parser.parse_args(argv)


# -- helpers ---------------------------------------------------------------


def model_config_from(args, input_size, classes):
    mode = MODE_ALIASES.get(args.mode, args.mode)
    return ModelConfig(
        input_size=input_size, classes=classes, hidden=args.hidden, window=args.window,
        heads=args.heads if args.heads is not None else max(1, args.hidden // 2),
        mode=mode, layers=args.layers, stacking=args.stacking, use_pe=not args.no_pe,
        n_pe=args.n_pe, use_linear_activation=not args.no_linear_activation,
        layer_tanh=args.layer_tanh, activate_query=args.activate_query,
    )


def train_config_from(args, model_cfg):
    return TrainConfig(lr=args.lr, beta1=args.beta1, beta2=args.beta2, adam_eps=args.adam_eps,
                       clip=args.clip, epochs=args.epochs, batch_size=args.batch_size,
                       seed=args.seed, model=model_cfg)


def load_datasets(parser, args):
    if args.synth:
        ds = synth_task(args.synth, args.n_train + args.n_test, args.seq_len, args.data_seed)
        return ds.split(args.n_train)
    if not args.data:
        parser.error("one of --data DIR (or $LARNN_DATA_DIR) or --synth KIND is required")
    train_ds = load_har(args.data, "train")
    return train_ds, load_har(args.data, "test", normalization=train_ds.normalization)


def _pct(acc):
    return f"{100.0 * acc:.1f}%"


# -- subcommands -----------------------------------------------------------


def cmd_train(parser, args, out):
    train_ds, test_ds = load_datasets(parser, args)
    cfg = train_config_from(args, model_config_from(args, train_ds.input_size, train_ds.classes))
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)

    def progress(m):
        print(f"epoch {m['epoch']}: train_loss={m['train_loss']:.4f} "
              f"train_acc={_pct(m['train_acc'])} test_acc={_pct(m['test_acc'])}", file=out, flush=True)

    model, opt, record = train(cfg, train_ds, test_ds, progress=progress)
    atomic_write_text(outdir / "metrics.csv", record.metrics_csv())
    save_checkpoint(model, opt, outdir / "model.ckpt")
    atomic_write_text(outdir / "config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    if record.diverged:
        print(f"training diverged after {len(record.epochs)} epochs", file=sys.stderr)
        return 1
    print(f"test accuracy: {_pct(record.final_test_acc)}", file=out)
    return 0


def cmd_eval(parser, args, out):
    model, _ = load_checkpoint(args.checkpoint)
    _, test_ds = load_datasets(parser, args)
    log = [] if args.dump_attention else None
    acc, loss = evaluate(model, test_ds, args.batch_size, attention_log=log)
    if args.dump_attention:
        atomic_write_text(args.dump_attention, attention_csv(log))
    print(f"test loss: {loss:.6f}", file=out)
    print(f"test accuracy: {_pct(acc)}", file=out)
    return 0


def attention_csv(log):
    """Rows ``sample, layer, head, t, pos0..pos{k-1}`` from an evaluation attention log."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    k = log[0][3].shape[2] if log else 0
    w.writerow(["sample", "layer", "head", "t"] + [f"pos{j}" for j in range(k)])
    for offset, layer, t, weights in log:
        for b in range(weights.shape[0]):
            for h in range(weights.shape[1]):
                w.writerow([offset + b, layer, h, t] + [repr(float(v)) for v in weights[b, h]])
    return buf.getvalue()


def cmd_gradcheck(parser, args, out):
    results = gradcheck.run_suite(tiny=args.tiny_config, seed=args.seed)
    for r in results:
        status = "ok" if r.ok else "FAIL"
        print(f"{status:4s} {r.label}: max rel err {r.rel_error:.3e} over {r.checked} entries", file=out)
    worst = max(results, key=lambda r: r.rel_error)
    print(f"worst: {worst.label} {worst.worst_name}{list(worst.worst_index)} "
          f"analytic={worst.analytic:.6e} numeric={worst.numeric:.6e} rel_err={worst.rel_error:.3e}",
          file=out)
    return 0 if all(r.ok for r in results) else 1


def cmd_pe_dump(parser, args, out):
    spec = EncodingSpec(args.window, args.n_pe)
    enc = build_encoding(spec)
    half = spec.n_pe // 2
    header = [f"sin{j}" for j in range(half)] + [f"cos{j}" for j in range(half)]
    if args.csv:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in enc:
            w.writerow([repr(float(v)) for v in row])
        atomic_write_text(args.csv, buf.getvalue())
    if args.pgm:
        atomic_write_bytes(args.pgm, pgm_bytes(enc))
    print(f"window={spec.window} n_pe={spec.n_pe} wavelengths={list(spec.wavelengths)}", file=out)
    return 0


def pgm_bytes(enc):
    """Binary PGM with window positions along x (newest left), channels along y."""
    img = np.rint((np.asarray(enc).T + 1.0) * 127.5).clip(0, 255).astype(np.uint8)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def cmd_sweep(parser, args, out):
    train_ds, test_ds = load_datasets(parser, args)
    base = train_config_from(args, model_config_from(args, train_ds.input_size, train_ds.classes))
    if args.grid:
        if args.space:
            space = load_space(args.space)
            axes = {k: v["choice"] for k, v in space.items() if "choice" in v}
        else:
            axes = dict(ABLATION_AXES)
        records = ablation(train_ds, test_ds, base, axes, seeds=tuple(range(args.seeds)),
                           log_path=args.log, jobs=args.jobs)
        report, text = summarize(records, axes)
        print(text, file=out)
        if args.report:
            atomic_write_text(args.report, json.dumps(report, indent=2, sort_keys=True, default=str) + "\n")
        print(f"{len(records)} trials logged to {args.log}", file=out)
        return 0
    space = load_space(args.space) if args.space else DEFAULT_SPACE
    records, _ = sweep(space, args.rounds, args.trials, args.seed, args.epochs, train_ds, test_ds,
                       base=base, log_path=args.log, jobs=args.jobs)
    scored = [r for r in records if not r.diverged and r.epochs]
    for r in records:
        status = "diverged" if r.diverged else _pct(r.best_test_acc)
        print(f"{r.trial_id}: {status} {json.dumps(r.config['overrides'], sort_keys=True)}", file=out)
    if scored:
        best = max(scored, key=lambda r: r.best_test_acc)
        print(f"best: {best.trial_id} test accuracy {_pct(best.best_test_acc)}", file=out)
    print(f"{len(records)} trials logged to {args.log}", file=out)
    return 0


def cmd_synth(parser, args, out):
    ds = synth_task(args.kind, args.n, args.seq_len, args.seed)
    buf = io.StringIO()
    ds.to_csv(buf)
    atomic_write_text(args.out, buf.getvalue())
    print(f"wrote {len(ds)} samples to {args.out}", file=out)
    return 0


COMMANDS = {
    "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
    "pe-dump": cmd_pe_dump, "sweep": cmd_sweep, "synth": cmd_synth,
}


def run(argv=None, out=None) -> int:
    out = out or sys.stdout
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        parser, args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](parser, args, out)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (LarnnError, OSError, ValueError) as exc:
        print(f"larnn {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
