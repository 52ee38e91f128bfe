"""Instrumented scalar for counting arithmetic performed on array values."""
from __future__ import annotations

from contextlib import contextmanager
from typing import Iterator

import numpy as np


class OpCounter:
    def __init__(self):
        self.adds = 0
        self.muls = 0

    @property
    def total(self) -> int:
        return self.adds + self.muls


_active = OpCounter()


class CountingScalar:
    """Float wrapper that records every add/multiply applied to it."""

    __slots__ = ("value",)

    def __init__(self, value):
        self.value = float(value.value if isinstance(value, CountingScalar) else value)

    @staticmethod
    def _raw(other):
        return other.value if isinstance(other, CountingScalar) else other

    def __add__(self, other):
        _active.adds += 1
        return CountingScalar(self.value + self._raw(other))

    __radd__ = __add__

    def __sub__(self, other):
        _active.adds += 1
        return CountingScalar(self.value - self._raw(other))

    def __rsub__(self, other):
        _active.adds += 1
        return CountingScalar(self._raw(other) - self.value)

    def __mul__(self, other):
        _active.muls += 1
        return CountingScalar(self.value * self._raw(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        _active.muls += 1
        return CountingScalar(self.value / self._raw(other))

    def __neg__(self):
        _active.muls += 1
        return CountingScalar(-self.value)

    def __eq__(self, other):
        return self.value == self._raw(other)

    def __hash__(self):
        return hash(self.value)

    def __float__(self):
        return self.value

    def __repr__(self):
        return f"CountingScalar({self.value!r})"


def counting_array(values) -> np.ndarray:
    """Object array of :class:`CountingScalar` with the shape of ``values``."""
    values = np.asarray(values, dtype=np.float64)
    out = np.empty(values.shape, dtype=object)
    flat = out.reshape(-1)
    for i, v in enumerate(values.reshape(-1)):
        flat[i] = CountingScalar(v)
    return out


def to_float(arr: np.ndarray) -> np.ndarray:
    return np.vectorize(float, otypes=[np.float64])(arr)


@contextmanager
def count_ops() -> Iterator[OpCounter]:
    """Count arithmetic on CountingScalars inside the block."""
    global _active
    prev = _active
    _active = OpCounter()
    try:
        yield _active
    finally:
        _active = prev
