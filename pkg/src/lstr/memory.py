"""Long/short-term FIFO memories and relative sinusoidal positions.

The newest ``m_S`` frames live in the short-term queue.  When a frame ages
past ``m_S`` steps it graduates into the long-term queue, which keeps the
``m_L`` frames before that and silently drops anything older.
"""

from __future__ import annotations

import numpy as np


class RingBuffer:
    """Fixed-capacity FIFO of equal-length vectors with O(1) push and read."""

    def __init__(self, capacity: int, width: int, dtype=np.float64):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = capacity
        self._data = np.zeros((capacity, width), dtype=dtype)
        self._start = 0
        self._size = 0

    def __len__(self):
        return self._size

    @property
    def full(self) -> bool:
        return self._size == self.capacity

    def push(self, row: np.ndarray) -> np.ndarray | None:
        """Append ``row``; return the evicted oldest row, if any."""
        if self.capacity == 0:
            return np.array(row, copy=True)
        evicted = None
        if self._size == self.capacity:
            evicted = self._data[self._start].copy()
            self._data[self._start] = row
            self._start = (self._start + 1) % self.capacity
        else:
            self._data[(self._start + self._size) % self.capacity] = row
            self._size += 1
        return evicted

    def __getitem__(self, i: int) -> np.ndarray:
        """Row ``i`` counted from the oldest entry (negative counts from newest)."""
        if i < 0:
            i += self._size
        if not 0 <= i < self._size:
            raise IndexError(i)
        return self._data[(self._start + i) % self.capacity]

    def ordered(self) -> np.ndarray:
        """Copy of the contents, oldest first."""
        if self._size == 0:
            return self._data[:0].copy()
        idx = (self._start + np.arange(self._size)) % self.capacity
        return self._data[idx]

    def copy(self) -> "RingBuffer":
        other = RingBuffer.__new__(RingBuffer)
        other.capacity = self.capacity
        other._data = self._data.copy()
        other._start = self._start
        other._size = self._size
        return other


def sinusoid(length: int, width: int, dtype=np.float64) -> np.ndarray:
    """``out[tau, 2i] = sin(tau / 10000**(2i/width))``, cos on odd columns."""
    tau = np.arange(length, dtype=np.float64)[:, None]
    even = np.arange(0, width, 2, dtype=np.float64)
    angle = tau / np.power(10000.0, even / width)
    out = np.zeros((length, width))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle[:, : width // 2])
    return out.astype(dtype)


class PositionalTable:
    """Precomputed encodings ``s_tau`` for relative ages ``0 <= tau < m_S + m_L``."""

    def __init__(self, length: int, width: int, dtype=np.float64):
        self.table = sinusoid(length, width, dtype)

    @classmethod
    def zeros(cls, length: int, width: int, dtype=np.float64) -> "PositionalTable":
        t = cls.__new__(cls)
        t.table = np.zeros((length, width), dtype=dtype)
        return t

    def __len__(self):
        return self.table.shape[0]

    def __getitem__(self, tau):
        return self.table[tau]

    def astype(self, dtype) -> "PositionalTable":
        t = PositionalTable.__new__(PositionalTable)
        t.table = self.table.astype(dtype)
        return t


class MemoryState:
    """Paired short/long FIFO queues plus the current time index.

    ``now`` is the index of the newest frame (the first pushed frame has
    index 0; ``now == -1`` means nothing has been pushed yet).
    """

    def __init__(self, m_s: int, m_l: int, width: int, dtype=np.float64):
        if m_s < 1:
            raise ValueError("short-term memory needs at least one slot")
        self.m_s, self.m_l, self.width = m_s, m_l, width
        self.short = RingBuffer(m_s, width, dtype)
        self.long = RingBuffer(m_l, width, dtype)
        self.now = -1

    def push(self, f) -> np.ndarray | None:
        """Push one frame; returns the frame that graduated into long-term memory."""
        f = np.asarray(f)
        if f.shape != (self.width,):
            raise ValueError(f"frame has shape {f.shape}, expected ({self.width},)")
        self.now += 1
        graduated = self.short.push(f)
        if graduated is not None:
            self.long.push(graduated)
        return graduated

    def copy(self) -> "MemoryState":
        other = MemoryState.__new__(MemoryState)
        other.m_s, other.m_l, other.width = self.m_s, self.m_l, self.width
        other.short, other.long = self.short.copy(), self.long.copy()
        other.now = self.now
        return other

    def ages(self) -> tuple[np.ndarray, np.ndarray]:
        """Relative ages tau of the (long, short) rows, oldest first."""
        ns, nl = len(self.short), len(self.long)
        short = np.arange(ns - 1, -1, -1)
        long = ns + np.arange(nl - 1, -1, -1)
        return long, short


def push_frame(state: MemoryState, f) -> MemoryState:
    state.push(f)
    return state


def snapshot(state: MemoryState, table: PositionalTable) -> tuple[np.ndarray, np.ndarray]:
    """Return (long_view, short_view): rows ``f_{T-tau} + s_tau``, oldest first.

    Slots not yet filled are left out, so views are shorter during warm-up.
    """
    if len(state.short) == 0:
        raise ValueError("snapshot of an empty memory")
    long_tau, short_tau = state.ages()
    long_view = state.long.ordered() + table[long_tau]
    short_view = state.short.ordered() + table[short_tau]
    return long_view, short_view


def downsample_index(n: int, stride: int) -> np.ndarray:
    """Indices (oldest first) of every ``stride``-th row counted back from the newest."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return np.arange(n - 1, -1, -stride)[::-1]


def downsample_long(view: np.ndarray, stride: int) -> np.ndarray:
    return view[downsample_index(len(view), stride)]
