"""Fixed-capacity FIFO of recent cell states, newest first."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError


class StateQueue:
    """Window of the ``capacity`` most recent B×H cell states.

    The queue is immutable: :meth:`push` returns a new queue, so a cell step
    never alters the state it was given. Entries stay tape-tracked for as long
    as they sit in the window; :meth:`detach` cuts them loose, e.g. when state
    is carried across sequence boundaries.
    """

    __slots__ = ("capacity", "entries")

    def __init__(self, capacity, entries):
        self.capacity = capacity
        self.entries = tuple(entries)

    @classmethod
    def new(cls, k, batch, hidden, init="zeros", value=0.0):
        """Pre-fill to capacity with zeros, a constant, or a seed tensor.

        ``init`` is ``"zeros"``, ``"constant"`` (uses ``value``) or
        ``"seed"`` (``value`` is a B×H tensor or array copied into every slot).
        """
        if k < 1:
            raise ContractError(f"queue capacity must be >= 1, got {k}")
        if init == "zeros":
            fill = np.zeros((batch, hidden))
        elif init == "constant":
            fill = np.full((batch, hidden), float(value))
        elif init == "seed":
            fill = np.array(value.data if isinstance(value, T.Tensor) else value, dtype=np.float64)
            if fill.shape != (batch, hidden):
                raise DimensionError(f"seed tensor shape {fill.shape} != ({batch}, {hidden})")
        else:
            raise ContractError(f"unknown queue init {init!r}")
        return cls(k, [T.Tensor(fill.copy()) for _ in range(k)])

    @property
    def batch(self):
        return self.entries[0].shape[0]

    @property
    def hidden(self):
        return self.entries[0].shape[1]

    def __len__(self):
        return len(self.entries)

    def push(self, c):
        shape = self.entries[0].shape
        if c.shape != shape:
            raise DimensionError(f"push: state shape {c.shape} != queue entry shape {shape}")
        return StateQueue(self.capacity, (c,) + self.entries[:-1])

    def as_tensor(self):
        """B×k×H tensor, time index 0 holding the newest state."""
        return T.stack(self.entries, axis=1)

    def detach(self):
        return StateQueue(self.capacity, [e.detach() for e in self.entries])


new_queue = StateQueue.new


def push(q: StateQueue, c) -> StateQueue:
    return q.push(c)


def as_tensor(q: StateQueue):
    return q.as_tensor()
