"""Temporal mixing by index remapping: patch shift and channel shift.

Both operators only move values around. They never add or multiply
anything, which the instrumented tests verify with object arrays of
:class:`~maskradar.opcount.CountingScalar`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ShapeError

# Each cell holds frame-index deltas; 0 keeps the current frame.
CANONICAL_CELLS = {
    "A": ((0, -1), (1, 0)),
    "B": ((0, -1), (1, 2)),
    "C": ((-4, -3, -2), (-1, 0, 1), (2, 3, 4)),
}


@dataclass(frozen=True)
class ShiftPattern:
    cell: tuple[tuple[int, ...], ...]
    name: str = "custom"

    def __post_init__(self):
        cell = tuple(tuple(int(v) for v in row) for row in self.cell)
        object.__setattr__(self, "cell", cell)
        k = len(cell)
        if k == 0 or any(len(row) != k for row in cell):
            raise ValueError(f"shift pattern cell must be a non-empty square grid, got {cell}")
        if 0 not in self.offsets:
            raise ValueError("shift pattern must keep the current frame (offset 0) somewhere")

    @property
    def k(self) -> int:
        return len(self.cell)

    @property
    def offsets(self) -> set[int]:
        return {v for row in self.cell for v in row}

    @property
    def temporal_field(self) -> int:
        return len(self.offsets)

    def tile(self, height: int, width: int) -> np.ndarray:
        """Offset for every spatial position: ``cell[h % k, w % k]``."""
        cell = np.asarray(self.cell, dtype=np.int64)
        return cell[np.arange(height)[:, None] % self.k, np.arange(width)[None, :] % self.k]


def make_pattern(name: str) -> ShiftPattern:
    try:
        return ShiftPattern(CANONICAL_CELLS[name], name=name)
    except KeyError:
        raise ValueError(f"unknown shift pattern {name!r}; expected one of {sorted(CANONICAL_CELLS)}") from None


def _source_frames(x: np.ndarray, pattern: ShiftPattern, sign: int):
    if x.ndim < 3 or x.size == 0:
        raise ShapeError(f"patch shift needs a non-empty [T,H,W,...] volume, got {x.shape}")
    t, h, w = x.shape[:3]
    src = (np.arange(t)[:, None, None] + sign * pattern.tile(h, w)[None]) % t
    return src, np.arange(h)[None, :, None], np.arange(w)[None, None, :]


def patch_shift(x: np.ndarray, pattern: ShiftPattern) -> np.ndarray:
    """``out[t, h, w] = x[(t + cell[h % k, w % k]) % T, h, w]`` for all channels."""
    return x[_source_frames(x, pattern, +1)]


def patch_shift_back(x: np.ndarray, pattern: ShiftPattern) -> np.ndarray:
    """Exact inverse of :func:`patch_shift` for the same pattern."""
    return x[_source_frames(x, pattern, -1)]


@dataclass(frozen=True)
class ChannelShiftSpec:
    ratio: float = 0.25

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"channel shift ratio must lie in [0, 1], got {self.ratio}")

    def fold(self, channels: int) -> int:
        """Channels moved in each direction; total moved is even."""
        n = int(np.floor(channels * self.ratio + 1e-9))
        return n // 2


def _shift_channels(x: np.ndarray, fold: int, first_from_past: bool) -> np.ndarray:
    out = x.copy()
    if fold == 0 or x.shape[0] == 0:
        return out
    a = slice(0, fold)
    b = slice(fold, 2 * fold)
    past, future = (a, b) if first_from_past else (b, a)
    out[1:, ..., past] = x[:-1, ..., past]
    out[0, ..., past] = 0
    out[:-1, ..., future] = x[1:, ..., future]
    out[-1, ..., future] = 0
    return out


def channel_shift(x: np.ndarray, spec: ChannelShiftSpec = ChannelShiftSpec()) -> np.ndarray:
    """First fold channels come from frame t-1, the next fold from t+1, zero-filled at the ends."""
    return _shift_channels(x, spec.fold(x.shape[-1]), first_from_past=True)


def channel_shift_adjoint(dy: np.ndarray, spec: ChannelShiftSpec = ChannelShiftSpec()) -> np.ndarray:
    """Transpose of :func:`channel_shift`, used to route gradients."""
    return _shift_channels(dy, spec.fold(dy.shape[-1]), first_from_past=False)
