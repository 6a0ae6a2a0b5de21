"""UCI HAR loading, synthetic sequence tasks and mini-batching."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import ContractError, DimensionError, FormatError

HAR_CLASSES = 6
HAR_STEPS = 128
HAR_CHANNELS = 9
SYNTH_KINDS = ("adding", "long-sum")
LONG_SUM_MARGIN = 0.5


@dataclass(frozen=True)
class Normalization:
    mean: np.ndarray  # per channel
    std: np.ndarray

    def apply(self, x):
        return (x - self.mean) / self.std


@dataclass
class Dataset:
    x: np.ndarray  # N×T×D
    labels: np.ndarray  # N class indices
    classes: int
    normalization: Optional[Normalization] = None
    channels: tuple = ()

    def __post_init__(self):
        if self.x.ndim != 3:
            raise DimensionError(f"dataset inputs must be N×T×D, got shape {self.x.shape}")
        if self.labels.shape != (self.x.shape[0],):
            raise DimensionError(f"labels shape {self.labels.shape} vs {self.x.shape[0]} samples")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ContractError(f"labels must lie in [0, {self.classes})")

    def __len__(self):
        return self.x.shape[0]

    @property
    def steps(self):
        return self.x.shape[1]

    @property
    def input_size(self):
        return self.x.shape[2]

    def subset(self, idx):
        return replace(self, x=self.x[idx], labels=self.labels[idx])

    def split(self, n_first):
        return self.subset(slice(0, n_first)), self.subset(slice(n_first, len(self)))

    def to_csv(self, path_or_file):
        """One row per sample: columns ``t0c0, t0c1, ..., label``."""
        N, steps, D = self.x.shape
        header = [f"t{t}c{c}" for t in range(steps) for c in range(D)] + ["label"]
        own = isinstance(path_or_file, (str, os.PathLike))
        f = open(path_or_file, "w", newline="") if own else path_or_file
        try:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(header)
            for row, label in zip(self.x.reshape(N, -1), self.labels):
                w.writerow([repr(float(v)) for v in row] + [int(label)])
        finally:
            if own:
                f.close()


# -- UCI HAR ---------------------------------------------------------------


def _read_matrix(path: Path, width=None):
    if not path.is_file():
        raise FileNotFoundError(f"missing dataset file: {path}")
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            tokens = line.split()
            if not tokens:
                continue
            if width is None:
                width = len(tokens)
            elif len(tokens) != width:
                raise FormatError(f"{path}:{lineno}: expected {width} values, found {len(tokens)}")
            rows.append(tokens)
    try:
        return np.array(rows, dtype=np.float64).reshape(len(rows), width or 0)
    except ValueError as exc:
        raise FormatError(f"{path}: unparseable value ({exc})") from None


def signal_files(root, split):
    folder = Path(root) / split / "Inertial Signals"
    files = sorted(folder.glob(f"*_{split}.txt"))
    if not files:
        raise FileNotFoundError(f"no signal files matching {folder}/*_{split}.txt")
    return files


def read_har_raw(root, split, classes=HAR_CLASSES):
    """Un-normalized ``(x, labels, channel_names)`` for one split."""
    if split not in ("train", "test"):
        raise ContractError(f"split must be 'train' or 'test', got {split!r}")
    files = signal_files(root, split)
    signals = [_read_matrix(p) for p in files]
    n = signals[0].shape[0]
    for p, s in zip(files, signals):
        if s.shape != signals[0].shape:
            raise FormatError(f"{p}: shape {s.shape} differs from {files[0].name} {signals[0].shape}")
    x = np.stack(signals, axis=-1)
    label_path = Path(root) / split / f"y_{split}.txt"
    raw = _read_matrix(label_path, width=1).reshape(-1)
    if raw.shape[0] != n:
        raise FormatError(f"{label_path}: {raw.shape[0]} labels for {n} samples")
    if np.any(raw != np.round(raw)) or raw.min() < 1 or raw.max() > classes:
        raise ContractError(f"{label_path}: labels must be integers in 1..{classes}")
    names = tuple(p.name[: -len(f"_{split}.txt")] for p in files)
    return x, raw.astype(np.int64) - 1, names


def fit_normalization(x) -> Normalization:
    flat = x.reshape(-1, x.shape[-1])
    std = flat.std(axis=0)
    return Normalization(flat.mean(axis=0), np.where(std > 0, std, 1.0))


def load_har(root, split, normalization: Optional[Normalization] = None, normalize=True,
             classes=HAR_CLASSES) -> Dataset:
    """Load ``<root>/<split>/Inertial Signals`` plus ``y_<split>.txt``.

    Channels follow sorted file names. Inputs are z-scored per channel with
    train-split statistics: fitted here for ``train``, and for ``test``
    either taken from ``normalization`` or fitted on the train split.
    """
    x, labels, names = read_har_raw(root, split, classes)
    norm = None
    if normalize:
        norm = normalization
        if norm is None:
            norm = fit_normalization(x if split == "train" else read_har_raw(root, "train", classes)[0])
        x = norm.apply(x)
    return Dataset(x, labels, classes, norm, names)


def write_har(ds: Dataset, root, split):
    """Write ``ds`` back in the UCI text layout (values in round-trip precision)."""
    folder = Path(root) / split / "Inertial Signals"
    folder.mkdir(parents=True, exist_ok=True)
    names = ds.channels or tuple(f"ch{c}" for c in range(ds.input_size))
    for c, name in enumerate(names):
        with open(folder / f"{name}_{split}.txt", "w") as f:
            for row in ds.x[:, :, c]:
                f.write(" ".join(repr(float(v)) for v in row) + "\n")
    with open(Path(root) / split / f"y_{split}.txt", "w") as f:
        f.writelines(f"{int(v) + 1}\n" for v in ds.labels)


def data_dir_default():
    return os.environ.get("LARNN_DATA_DIR")


# -- synthetic tasks -------------------------------------------------------


def adding_labels(x):
    """Reference label rule for the adding task."""
    marked = (x[:, :, 0] * x[:, :, 1]).sum(axis=1)
    return (marked > 1.0).astype(np.int64)


def long_sum_labels(x):
    """1 when the second half of the sequence has the larger sum."""
    half = x.shape[1] // 2
    return (x[:, half:, 0].sum(axis=1) > x[:, :half, 0].sum(axis=1)).astype(np.int64)


def long_sum_gap_std(steps):
    """Standard deviation of (second-half sum - first-half sum) for a unit-step walk."""
    half = steps // 2
    j = np.arange(steps)
    # weight of increment j in the gap: later-half positions it reaches minus earlier-half ones
    w = np.where(j < half, (steps - half) - (half - j), steps - j)
    return float(np.sqrt(np.sum(w * w)))


def synth_task(kind, n, steps, seed, margin=LONG_SUM_MARGIN) -> Dataset:
    """Binary sequence-classification tasks.

    ``adding``: channel 0 holds U(0, 1) values, channel 1 flags two positions;
    the label says whether the two flagged values sum past 1.

    ``long-sum``: a single-channel random walk started at 0 with N(0, 1/T)
    increments; the label says which half of the sequence has the larger
    sum. Walks whose half-sum gap lies within ``margin`` standard deviations
    of zero are redrawn, and half the walks are negated so that exactly
    ``n // 2`` samples carry label 1.
    """
    if kind not in SYNTH_KINDS:
        raise ContractError(f"unknown synthetic task {kind!r}; expected one of {SYNTH_KINDS}")
    if steps < 4:
        raise ContractError(f"synthetic tasks need at least 4 steps, got {steps}")
    rng = np.random.default_rng(seed)
    if kind == "adding":
        x = np.zeros((n, steps, 2))
        x[:, :, 0] = rng.uniform(0.0, 1.0, (n, steps))
        for row in range(n):
            x[row, rng.choice(steps, size=2, replace=False), 1] = 1.0
        return Dataset(x, adding_labels(x), 2, channels=("value", "marker"))

    step_std = 1.0 / np.sqrt(steps)
    threshold = margin * long_sum_gap_std(steps) * step_std
    kept, have = [], 0
    while have < n:
        walk = np.cumsum(rng.normal(0.0, step_std, (n, steps)), axis=1)
        walk = walk[np.abs(_half_gap(walk)) > threshold][: n - have]
        kept.append(walk)
        have += walk.shape[0]
    x = np.concatenate(kept)[:, :, None]
    want = np.zeros(n, dtype=np.int64)
    want[rng.permutation(n)[: n // 2]] = 1
    x[long_sum_labels(x) != want] *= -1.0
    return Dataset(x, long_sum_labels(x), 2, channels=("walk",))


def _half_gap(walk):
    half = walk.shape[1] // 2
    return walk[:, half:].sum(axis=1) - walk[:, :half].sum(axis=1)


# -- batching --------------------------------------------------------------


def batches(ds: Dataset, batch_size, shuffle_seed=None) -> Iterator[tuple]:
    """Yield ``(x, labels)`` covering every sample once; last batch may be short."""
    if batch_size < 1:
        raise ContractError(f"batch size must be >= 1, got {batch_size}")
    n = len(ds)
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield ds.x[idx], ds.labels[idx]
