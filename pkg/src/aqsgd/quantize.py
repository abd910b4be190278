"""Unbiased stochastic quantizers, payload codecs and size accounting.

Two lossy schemes are provided.

``L2StochasticRound``
    Normalize by the L2 norm and round every coordinate stochastically to
    the grid ``k / 2**b`` on ``[-1, 1]``. Per coordinate the error is below
    ``||x|| / 2**b`` for every draw, so ``||x - Q(x)|| <= sqrt(d) / 2**b * ||x||``
    holds deterministically. The grid has ``2**(b+1) + 1`` levels, hence codes
    are ``b + 2`` bits wide.

``RangeUniformStochastic``
    Normalize by the max norm into ``[-1, 1]`` and round stochastically onto
    ``2**b`` evenly spaced levels that include both endpoints. Codes are ``b``
    bits wide and code 0 is the minimum level ``-scale``.

Both use one uniform draw per coordinate: a value a fraction ``p`` of the way
from its lower level to the next one rounds up with probability ``p``.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass

import numpy as np

from .constants import NoCertificateError
from .numerics import RngStream, as_vector

MAX_BITS = 16
SCALE_BYTES = 8


class PayloadFormatError(ValueError):
    """A payload or wire buffer is malformed."""


class Scheme(enum.IntEnum):
    IDENTITY = 0
    L2_STOCHASTIC = 1
    RANGE_UNIFORM = 2


@dataclass(frozen=True)
class QuantizerSpec:
    scheme: Scheme
    bits: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if self.scheme != Scheme.IDENTITY and not 1 <= self.bits <= MAX_BITS:
            raise ValueError(f"bits must be in [1, {MAX_BITS}], got {self.bits}")

    @property
    def code_width(self) -> int:
        if self.scheme == Scheme.L2_STOCHASTIC:
            return self.bits + 2
        if self.scheme == Scheme.RANGE_UNIFORM:
            return self.bits
        return 64

    @property
    def max_code(self) -> int:
        if self.scheme == Scheme.L2_STOCHASTIC:
            return 2 ** (self.bits + 1)
        return 2**self.bits - 1

    def __str__(self):
        if self.scheme == Scheme.IDENTITY:
            return "identity"
        name = "l2" if self.scheme == Scheme.L2_STOCHASTIC else "range"
        return f"{name}{self.bits}"


IDENTITY = QuantizerSpec(Scheme.IDENTITY)


def l2_spec(bits: int) -> QuantizerSpec:
    return QuantizerSpec(Scheme.L2_STOCHASTIC, bits)


def range_spec(bits: int) -> QuantizerSpec:
    return QuantizerSpec(Scheme.RANGE_UNIFORM, bits)


@dataclass(frozen=True)
class QuantizedPayload:
    """Scale plus integer codes; for Identity, ``raw`` carries the vector."""

    scheme: Scheme
    bits: int
    scale: float
    codes: np.ndarray | None = None
    raw: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return len(self.raw) if self.raw is not None else len(self.codes)


def _positions(spec: QuantizerSpec, x: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Fractional code positions in ``[0, max_code]`` (``scale`` broadcasts)."""
    top = spec.max_code
    if spec.scheme == Scheme.L2_STOCHASTIC:
        half = float(2**spec.bits)
        t = x * half / scale + half
    else:
        t = (x + scale) * top / (2.0 * scale)
    return np.clip(t, 0.0, float(top))


def _round_stochastic(t: np.ndarray, u: np.ndarray, top: int) -> np.ndarray:
    low = np.floor(t)
    codes = low + (u < (t - low))
    return np.minimum(codes, top).astype(np.uint32)


def _scales(spec: QuantizerSpec, X: np.ndarray) -> np.ndarray:
    if spec.scheme == Scheme.L2_STOCHASTIC:
        return np.sqrt(np.einsum("ij,ij->i", X, X))
    return np.max(np.abs(X), axis=1)


def quantize_many(spec: QuantizerSpec, X, rng: RngStream) -> list[QuantizedPayload]:
    """Quantize each row of ``X`` independently.

    Draws are consumed row by row, so this is equivalent to calling
    :func:`quantize` on every row in order.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("expected a 2-D array of row vectors")
    if spec.scheme == Scheme.IDENTITY:
        return [QuantizedPayload(Scheme.IDENTITY, 0, 0.0, raw=row.copy()) for row in X]
    scales, codes = _quantize_rows(spec, X, rng)
    return [
        QuantizedPayload(spec.scheme, spec.bits, float(s), codes=c)
        for s, c in zip(scales, codes)
    ]


def _quantize_rows(spec: QuantizerSpec, X: np.ndarray, rng: RngStream):
    scales = _scales(spec, X)
    u = rng.uniform(X.shape)
    zero = scales == 0.0
    safe = np.where(zero, 1.0, scales)[:, None]
    codes = _round_stochastic(_positions(spec, X, safe), u, spec.max_code)
    if zero.any():
        # zero rows decode to exact zero: scale 0 makes every level 0
        codes[zero] = 0
    return scales, codes


def quantize(spec: QuantizerSpec, x, rng: RngStream) -> QuantizedPayload:
    x = as_vector(x)
    if spec.scheme == Scheme.IDENTITY:
        return QuantizedPayload(Scheme.IDENTITY, 0, 0.0, raw=x.copy())
    scales, codes = _quantize_rows(spec, x[None, :], rng)
    return QuantizedPayload(spec.scheme, spec.bits, float(scales[0]), codes=codes[0])


def dequantize_many(spec: QuantizerSpec, scales, codes) -> np.ndarray:
    """Vectorized decode of a 2-D code array with one scale per row."""
    scales = np.asarray(scales, dtype=np.float64)[:, None]
    c = np.asarray(codes).astype(np.float64)
    if spec.scheme == Scheme.L2_STOCHASTIC:
        half = float(2**spec.bits)
        return scales * (c - half) / half
    top = float(spec.max_code)
    return scales * (2.0 * c - top) / top


def dequantize(spec: QuantizerSpec, p: QuantizedPayload) -> np.ndarray:
    if p.scheme != spec.scheme or (spec.scheme != Scheme.IDENTITY and p.bits != spec.bits):
        raise PayloadFormatError(f"payload encoded as {p.scheme.name}/{p.bits}, expected {spec}")
    if spec.scheme == Scheme.IDENTITY:
        if p.raw is None:
            raise PayloadFormatError("identity payload without raw values")
        return np.array(p.raw, dtype=np.float64)
    codes = np.asarray(p.codes)
    if codes.ndim != 1 or codes.size == 0:
        raise PayloadFormatError("codes must be a non-empty 1-D array")
    if np.any(codes < 0) or np.any(codes > spec.max_code):
        raise PayloadFormatError(f"code outside [0, {spec.max_code}] for {spec}")
    if not math.isfinite(p.scale) or p.scale < 0:
        raise PayloadFormatError("scale must be finite and nonnegative")
    return dequantize_many(spec, [p.scale], codes[None, :])[0]


def certified_cq(spec: QuantizerSpec, d: int) -> float:
    """Deterministic relative-error constant ``c_Q`` at dimension ``d``."""
    if d < 1:
        raise ValueError("dimension must be positive")
    if spec.scheme == Scheme.IDENTITY:
        return 0.0
    if spec.scheme == Scheme.L2_STOCHASTIC:
        return math.sqrt(d) / 2**spec.bits
    raise NoCertificateError(f"{spec} has no certified relative error constant")


def empirical_cq(spec: QuantizerSpec, d: int, rng: RngStream, trials: int = 2000) -> float:
    """Largest observed ``||x - Q(x)|| / ||x||`` over Gaussian test vectors."""
    if spec.scheme == Scheme.IDENTITY:
        return 0.0
    X = rng.normal((trials, d))
    scales, codes = _quantize_rows(spec, X, rng)
    err = X - dequantize_many(spec, scales, codes)
    return float(np.max(np.linalg.norm(err, axis=1) / np.linalg.norm(X, axis=1)))


def encoded_bytes(spec: QuantizerSpec, d: int) -> int:
    if spec.scheme == Scheme.IDENTITY:
        return 8 * d
    return -(-d * spec.code_width // 8) + SCALE_BYTES


def pack_codes(codes: np.ndarray, width: int) -> bytes:
    codes = np.asarray(codes, dtype=np.uint32)
    bits = ((codes[:, None] >> np.arange(width, dtype=np.uint32)) & 1).astype(np.uint8)
    return np.packbits(bits.ravel(), bitorder="little").tobytes()


def unpack_codes(data: bytes, width: int, d: int) -> np.ndarray:
    nbytes = -(-d * width // 8)
    if len(data) != nbytes:
        raise PayloadFormatError(f"expected {nbytes} code bytes, got {len(data)}")
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    if np.any(bits[d * width:]):
        raise PayloadFormatError("nonzero padding bits")
    bits = bits[: d * width].reshape(d, width).astype(np.uint32)
    return (bits << np.arange(width, dtype=np.uint32)).sum(axis=1).astype(np.uint32)


def encode_payload(p: QuantizedPayload) -> bytes:
    """Wire bytes: LE float64 scale then LSB-first packed codes; Identity is raw LE float64."""
    if p.scheme == Scheme.IDENTITY:
        return np.asarray(p.raw, dtype="<f8").tobytes()
    spec = QuantizerSpec(p.scheme, p.bits)
    return struct.pack("<d", p.scale) + pack_codes(p.codes, spec.code_width)


def decode_payload(data: bytes, spec: QuantizerSpec, d: int) -> QuantizedPayload:
    if len(data) != encoded_bytes(spec, d):
        raise PayloadFormatError(
            f"{spec} payload for d={d} must be {encoded_bytes(spec, d)} bytes, got {len(data)}"
        )
    if spec.scheme == Scheme.IDENTITY:
        return QuantizedPayload(Scheme.IDENTITY, 0, 0.0, raw=np.frombuffer(data, dtype="<f8").astype(np.float64))
    (scale,) = struct.unpack("<d", data[:SCALE_BYTES])
    codes = unpack_codes(data[SCALE_BYTES:], spec.code_width, d)
    if np.any(codes > spec.max_code):
        raise PayloadFormatError(f"code outside [0, {spec.max_code}] for {spec}")
    return QuantizedPayload(spec.scheme, spec.bits, scale, codes=codes)


def roundtrip_rows(spec: QuantizerSpec, X, rng: RngStream) -> np.ndarray:
    """``Q(x)`` for every row of ``X`` (same draws as :func:`quantize_many`)."""
    X = np.asarray(X, dtype=np.float64)
    if spec.scheme == Scheme.IDENTITY:
        return X.copy()
    scales, codes = _quantize_rows(spec, X, rng)
    return dequantize_many(spec, scales, codes)


def rounding_profile(spec: QuantizerSpec, x) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate level spacing (in units of ``x``) and round-up probability.

    A coordinate decodes to its lower level plus ``spacing`` with probability
    ``p``, so the exact variance of ``Q(x)_j`` is ``spacing**2 * p * (1 - p)``.
    """
    x = as_vector(x)
    if spec.scheme == Scheme.IDENTITY:
        return np.zeros_like(x), np.zeros_like(x)
    scale = float(_scales(spec, x[None, :])[0])
    if scale == 0.0:
        return np.zeros_like(x), np.zeros_like(x)
    t = _positions(spec, x[None, :], np.array([[scale]]))[0]
    if spec.scheme == Scheme.L2_STOCHASTIC:
        spacing = scale / 2**spec.bits
    else:
        spacing = 2.0 * scale / spec.max_code
    return np.full_like(x, spacing), t - np.floor(t)
