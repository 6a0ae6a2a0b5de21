"""Binary checkpoints of model weights, BN statistics and Adam moments.

Layout (all integers little-endian)::

    b"LARN" | version u32 | entry count u32
    per entry: name length u16 | UTF-8 name | rank u8 | dims u32 * rank | f64 payload

Besides ``param:<name>`` and ``bn:<name>.running_{mean,var}`` entries the
file carries ``config:<field>`` scalars (string-valued fields are stored as
their index in the allowed choices) and, when an optimizer is given,
``adam:m:<name>``, ``adam:v:<name>`` and the ``adam:*`` scalars.
"""

from __future__ import annotations

import struct
from dataclasses import fields

import numpy as np

from .cell import MODES
from .errors import FormatError
from .fileio import atomic_write_bytes
from .model import STACKINGS, Model, ModelConfig
from .trainer import Adam

MAGIC = b"LARN"
VERSION = 1
_CHOICES = {"mode": MODES, "stacking": STACKINGS}


def encode(entries) -> bytes:
    """Serialize an ordered ``[(name, array), ...]`` list."""
    out = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries:
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def decode(blob: bytes):
    """Inverse of :func:`encode`; raises :class:`FormatError` with the failing offset."""
    view = memoryview(blob)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"truncated checkpoint while reading {what}", pos)
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise FormatError("bad magic, not a LARNN checkpoint", 0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {VERSION})", 4)
    entries = []
    for _ in range(count):
        start = pos
        (n,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = bytes(take(n, "name")).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("entry name is not UTF-8", start + 2) from None
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(take(8 * size, f"payload of {name!r}"), dtype="<f8").reshape(dims)
        entries.append((name, arr.astype(np.float64)))
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after last entry", pos)
    return entries


def model_entries(model: Model, optimizer: Adam = None):
    entries = []
    for f in fields(ModelConfig):
        value = getattr(model.config, f.name)
        if f.name in _CHOICES:
            value = _CHOICES[f.name].index(value)
        entries.append((f"config:{f.name}", np.array(float(value))))
    for name, p in model.named_parameters().items():
        entries.append((f"param:{name}", p.data))
    for name, bn in model.batch_norms().items():
        entries.append((f"bn:{name}.running_mean", bn.running_mean))
        entries.append((f"bn:{name}.running_var", bn.running_var))
    if optimizer is not None:
        for key in ("t", "lr", "beta1", "beta2", "eps"):
            entries.append((f"adam:{key}", np.array(float(getattr(optimizer, key)))))
        for name in model.named_parameters():
            entries.append((f"adam:m:{name}", optimizer.m[name]))
            entries.append((f"adam:v:{name}", optimizer.v[name]))
    return entries


def save_checkpoint(model: Model, optimizer: Adam = None, path=None) -> bytes:
    blob = encode(model_entries(model, optimizer))
    if path is not None:
        atomic_write_bytes(path, blob)
    return blob


def load_checkpoint(path_or_bytes):
    """Return ``(model, optimizer_or_None)`` rebuilt from a checkpoint."""
    if isinstance(path_or_bytes, (bytes, bytearray, memoryview)):
        blob = bytes(path_or_bytes)
    else:
        with open(path_or_bytes, "rb") as f:
            blob = f.read()
    table = dict(decode(blob))
    cfg = {}
    for f in fields(ModelConfig):
        key = f"config:{f.name}"
        if key not in table:
            raise FormatError(f"checkpoint lacks {key}")
        value = table[key].item()
        if f.name in _CHOICES:
            value = _CHOICES[f.name][int(value)]
        elif f.type in ("bool", bool):
            value = bool(value)
        elif f.type in ("int", int):
            value = int(value)
        cfg[f.name] = value
    model = Model(ModelConfig(**cfg))
    for name, p in model.named_parameters().items():
        p.data = _fetch(table, f"param:{name}", p.shape)
    for name, bn in model.batch_norms().items():
        bn.running_mean = _fetch(table, f"bn:{name}.running_mean", bn.running_mean.shape)
        bn.running_var = _fetch(table, f"bn:{name}.running_var", bn.running_var.shape)
    optimizer = None
    if "adam:t" in table:
        params = model.named_parameters()
        optimizer = Adam(params, table["adam:lr"].item(), table["adam:beta1"].item(),
                         table["adam:beta2"].item(), table["adam:eps"].item())
        optimizer.t = int(table["adam:t"].item())
        for name, p in params.items():
            optimizer.m[name] = _fetch(table, f"adam:m:{name}", p.shape)
            optimizer.v[name] = _fetch(table, f"adam:v:{name}", p.shape)
    return model, optimizer


def _fetch(table, key, shape):
    if key not in table:
        raise FormatError(f"checkpoint lacks entry {key}")
    arr = table[key]
    if arr.shape != tuple(shape):
        raise FormatError(f"entry {key} has shape {arr.shape}, expected {tuple(shape)}")
    return arr.copy()
