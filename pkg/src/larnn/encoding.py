"""Recency-indexed sinusoidal encoding concatenated onto the state window.

Row ``pos`` describes the window slot ``pos`` steps back from the newest
state (``pos = 0``). Wavelengths are powers of two, the longest being the
smallest power of two of at least four window lengths, so the slowest sine
never passes its first peak inside the window. Sine and cosine channels are
laid out as two contiguous blocks.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError

DEFAULT_N_PE = 8


def longest_wavelength(window: int) -> int:
    return 1 << math.ceil(math.log2(4 * window))


@dataclass(frozen=True)
class EncodingSpec:
    window: int
    n_pe: int = DEFAULT_N_PE
    wavelengths: tuple = field(init=False)

    def __post_init__(self):
        if self.window < 1:
            raise ContractError(f"encoding window must be >= 1, got {self.window}")
        if self.n_pe and (self.n_pe < 2 or self.n_pe % 2):
            raise ContractError(f"n_pe must be an even number >= 2 (or 0 to disable), got {self.n_pe}")
        top = longest_wavelength(self.window)
        waves = tuple(top >> j for j in range(self.n_pe // 2))
        if waves and waves[-1] < 2:
            raise ContractError(f"n_pe={self.n_pe} needs wavelengths below 2 for window {self.window}")
        object.__setattr__(self, "wavelengths", waves)

    @property
    def enabled(self):
        return self.n_pe > 0


@functools.lru_cache(maxsize=64)
def build_encoding(spec: EncodingSpec) -> np.ndarray:
    """Return the ``window × n_pe`` encoding matrix (cached, read-only)."""
    pos = np.arange(spec.window, dtype=np.float64)[:, None]
    lam = np.asarray(spec.wavelengths, dtype=np.float64)[None, :]
    phase = 2.0 * np.pi * pos / lam
    enc = np.concatenate([np.sin(phase), np.cos(phase)], axis=1)
    enc.flags.writeable = False
    return enc


def concat_encoding(v: T.Tensor, spec: EncodingSpec) -> T.Tensor:
    """Append the encoding to the features of a B×k×H window tensor."""
    if v.ndim != 3 or v.shape[1] != spec.window:
        raise DimensionError(f"concat_encoding: window tensor {v.shape} vs window {spec.window}")
    if not spec.enabled:
        return v
    enc = build_encoding(spec)
    pe = T.Tensor(np.broadcast_to(enc, (v.shape[0],) + enc.shape))
    return T.concat([v, pe], axis=-1)
