"""Uniform symmetric fake-quantization and SQNR."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, QuantInputError

MIN_BITS = 2
MAX_BITS = 8


@dataclass(frozen=True)
class QuantSpec:
    """Signed b-bit grid ``scale * [-2^(b-1), 2^(b-1)-1]``."""

    bits: int
    scale: float

    def __post_init__(self):
        if not MIN_BITS <= self.bits <= MAX_BITS:
            raise ValueError(f"bits must be in [{MIN_BITS}, {MAX_BITS}], got {self.bits}")
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")

    @property
    def qmin(self) -> int:
        return -(1 << (self.bits - 1))

    @property
    def qmax(self) -> int:
        return (1 << (self.bits - 1)) - 1


@dataclass(frozen=True)
class QuantizedTensor:
    codes: np.ndarray  # int8
    spec: QuantSpec

    @property
    def shape(self) -> tuple[int, ...]:
        return self.codes.shape


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest, ties away from zero (``np.round`` ties to even)."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise QuantInputError("input contains NaN or Inf")


def quantize(x, spec: QuantSpec) -> QuantizedTensor:
    x = np.asarray(x)
    _check_finite(x)
    q = round_half_away(x.astype(np.float64) / spec.scale)
    codes = np.clip(q, spec.qmin, spec.qmax).astype(np.int8)
    return QuantizedTensor(codes, spec)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    return (q.codes.astype(np.float64) * q.spec.scale).astype(np.float32)


def fake_quantize(x, spec: QuantSpec) -> np.ndarray:
    return dequantize(quantize(x, spec))


def minmax_scale(x, bits: int) -> QuantSpec:
    """Scale ``max|x| / 2^(bits-1)``; an all-zero tensor gets scale 1."""
    x = np.asarray(x)
    if x.size == 0:
        raise QuantInputError("cannot calibrate on an empty tensor")
    _check_finite(x)
    peak = float(np.max(np.abs(x)))
    scale = peak / (1 << (bits - 1)) if peak > 0 else 1.0
    return QuantSpec(bits, scale)


def sqnr_db(x, x_hat) -> float:
    """``10 log10(sum x^2 / sum (x - x_hat)^2)`` in float64.

    Returns ``+inf`` for a perfect reconstruction and ``-inf`` when the
    signal is all zero but the reconstruction is not.
    """
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise DimensionError(f"sqnr_db: shape {x.shape} vs {x_hat.shape}")
    noise = float(np.sum((x - x_hat) ** 2))
    if noise == 0.0:
        return math.inf
    signal = float(np.sum(x * x))
    if signal == 0.0:
        return -math.inf
    return 10.0 * math.log10(signal / noise)
