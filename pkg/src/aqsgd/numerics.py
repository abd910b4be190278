"""Dense vector helpers, counter-based random streams and finite differences.

Vectors and matrices are plain ``numpy.float64`` arrays. Every random draw in
the package comes from an :class:`RngStream`, a Philox4x64-10 generator keyed
by ``(seed, stream_id)``; Philox is counter based, so a draw is a pure function
of the key and its index and does not depend on the platform.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

# Stream ids. Quantizer streams are partitioned per (boundary, role).
SAMPLING_STREAM = 0
INIT_STREAM = 1
DATA_STREAM = 2
_BOUNDARY_STREAM_BASE = 1000

FORWARD = 0
BACKWARD = 1
BUFFER = 2


class NonFiniteError(ValueError):
    """A vector contained NaN or Inf."""


class DegenerateEvaluationError(ValueError):
    """A function evaluated during finite differencing was not finite."""


def as_vector(x, d: int | None = None) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {v.shape}")
    if d is not None and v.shape[0] != d:
        raise ValueError(f"expected length {d}, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise NonFiniteError("vector has non-finite entries")
    return v


def l2_norm(v) -> float:
    v = np.asarray(v, dtype=np.float64)
    return math.sqrt(float(np.dot(v, v)))


def finite_diff_grad(fn: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar field ``fn`` at ``x``."""
    if not h > 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    for i in range(x.shape[0]):
        old = x[i]
        x[i] = old + h
        fp = float(fn(x))
        x[i] = old - h
        fm = float(fn(x))
        x[i] = old
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise DegenerateEvaluationError(f"non-finite evaluation at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def boundary_stream_id(boundary: int, role: int) -> int:
    """Stream id for quantizer draws at ``boundary`` (0-based) and ``role``."""
    return _BOUNDARY_STREAM_BASE + 3 * boundary + role


class RngStream:
    """One independent, reproducible stream of random draws.

    Instances are single-owner. Two instances built from the same
    ``(seed, stream_id)`` produce identical sequences, which is how the two
    sides of a boundary replay the same buffer re-encoding draws.
    """

    def __init__(self, seed: int, stream_id: int):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        key = (self.stream_id << 64) | self.seed
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def uniform(self, size=None):
        return self._gen.random(size)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def snapshot(self) -> dict:
        return self._gen.bit_generator.state

    def restore(self, state: dict) -> None:
        self._gen.bit_generator.state = state

    def clone(self) -> "RngStream":
        twin = RngStream(self.seed, self.stream_id)
        twin.restore(self.snapshot())
        return twin
