"""Three-region quantizer for post-GeLU activations (OPT-m).

Values are first rounded onto a wide signed grid of step ``s0``
(``bits + m1`` bits). Each wide code then lands in one of three regions:

* negative values keep the low ``bits-2`` bits at scale ``s0``;
* small positives below ``2^(m0+bits-3)`` keep ``bits-2`` bits after dropping
  (with rounding) the low ``m0`` bits, i.e. scale ``s1 = s0 * 2^m0``;
* large positives keep ``bits-1`` bits after dropping the low ``m1`` bits,
  scale ``s2 = s0 * 2^m1``.

Bit layout of a packed code (MSB first)::

    negative    0 1 | magnitude[bits-2]
    small-pos   0 0 | magnitude[bits-2]
    large-pos   1   | magnitude[bits-1]

Because every scale is ``s0`` times a power of two, regions can be realigned
with shifts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Callable, Sequence

import numpy as np

from .errors import EncodingError, FitError, QuantInputError
from .quant import round_half_away

MIN_REGION_BITS = 4
MAX_REGION_BITS = 8
GELU_PERCENTILE = 99.95
S0_GRID_SIZE = 100
S0_GRID_SPAN = 1.2

Metric = Callable[[np.ndarray, np.ndarray], float]


def mse(reference: np.ndarray, quantized: np.ndarray) -> float:
    d = np.asarray(reference, np.float64) - np.asarray(quantized, np.float64)
    return float(np.mean(d * d))


class Region(IntEnum):
    NEG = 0
    SMALL_POS = 1
    LARGE_POS = 2


@dataclass(frozen=True)
class RegionCode:
    region: Region
    magnitude: int


@dataclass(frozen=True)
class GeluStats:
    x_low: float  # mean of per-sample minima
    x_up: float  # 99.95th percentile of pooled values

    def __post_init__(self):
        if not self.x_up > 0:
            raise FitError(f"post-GeLU upper bound must be positive, got {self.x_up}")


@dataclass(frozen=True)
class RegionQuantizer:
    bits: int
    s0: float
    m0: int
    m1: int

    def __post_init__(self):
        if not MIN_REGION_BITS <= self.bits <= MAX_REGION_BITS:
            raise ValueError(f"region quantizer bits must be in [4, 8], got {self.bits}")
        if not (math.isfinite(self.s0) and self.s0 > 0):
            raise ValueError(f"s0 must be positive, got {self.s0}")
        if not 0 <= self.m0 < self.m1:
            raise ValueError(f"need 0 <= m0 < m1, got m0={self.m0}, m1={self.m1}")

    @property
    def s1(self) -> float:
        return self.s0 * 2.0**self.m0

    @property
    def s2(self) -> float:
        return self.s0 * 2.0**self.m1

    @property
    def small_max(self) -> int:
        """Largest magnitude in the negative and small-positive fields."""
        return (1 << (self.bits - 2)) - 1

    @property
    def large_max(self) -> int:
        return (1 << (self.bits - 1)) - 1

    @property
    def boundary(self) -> int:
        """Wide code where the large-positive region starts."""
        return 1 << (self.m0 + self.bits - 3)

    @property
    def boundary_value(self) -> float:
        return self.s0 * self.boundary

    def to_dict(self) -> dict:
        return {"bits": self.bits, "s0": self.s0, "m0": self.m0, "m1": self.m1}

    @classmethod
    def from_dict(cls, d) -> "RegionQuantizer":
        return cls(int(d["bits"]), float(d["s0"]), int(d["m0"]), int(d["m1"]))


# --------------------------------------------------------------------------
# Calibration statistics
# --------------------------------------------------------------------------


def collect_gelu_stats(samples: Sequence[np.ndarray], percentile: float = GELU_PERCENTILE) -> GeluStats:
    """Lower bound = mean per-sample minimum; upper bound = pooled percentile."""
    samples = [np.asarray(s, dtype=np.float64).ravel() for s in samples]
    if not samples or any(s.size == 0 for s in samples):
        raise QuantInputError("need at least one non-empty post-GeLU sample")
    x_low = float(np.mean([s.min() for s in samples]))
    x_up = float(np.percentile(np.concatenate(samples), percentile, method="linear"))
    return GeluStats(x_low, x_up)


def compute_m1(stats: GeluStats, bits: int) -> int:
    """Shift between the negative and large-positive scales.

    ``s0 ~ x_low / -R1`` and ``s2 ~ x_up / R3`` with ``R1 = 2^(bits-2)-1`` and
    ``R3 = 2^(bits-1)-1``; m1 is the rounded log2 of their ratio, clamped to
    ``[1, bits+2]``.
    """
    if not (stats.x_low < 0 < stats.x_up):
        raise FitError(f"need x_low < 0 < x_up, got x_low={stats.x_low}, x_up={stats.x_up}")
    r3 = (1 << (bits - 1)) - 1
    r1 = (1 << (bits - 2)) - 1
    ratio = (stats.x_up / r3) / (stats.x_low / -r1)
    m1 = int(round_half_away(np.float64(math.log2(ratio))))
    return min(max(m1, 1), bits + 2)


# --------------------------------------------------------------------------
# Encode / decode
# --------------------------------------------------------------------------


def _shift_round(xq: np.ndarray, m: int) -> np.ndarray:
    """Drop the low ``m`` bits of non-negative ints, rounding the first dropped bit."""
    if m == 0:
        return xq
    return (xq + (1 << (m - 1))) >> m


def wide_codes(x, rq: RegionQuantizer) -> np.ndarray:
    """Round ``x / s0`` onto the signed ``bits + m1`` grid."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise QuantInputError("input contains NaN or Inf")
    half = 1 << (rq.bits + rq.m1 - 1)
    q = np.clip(round_half_away(x / rq.s0), -half, half - 1)
    return q.astype(np.int64)


def encode_array(x, rq: RegionQuantizer) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized region encoding: returns (region ids, magnitudes)."""
    return _encode_wide(wide_codes(x, rq), rq)


def _encode_wide(xq: np.ndarray, rq: RegionQuantizer) -> tuple[np.ndarray, np.ndarray]:
    region = np.where(xq < 0, Region.NEG, np.where(xq < rq.boundary, Region.SMALL_POS, Region.LARGE_POS))
    pos = np.maximum(xq, 0)
    mag = np.where(
        region == Region.NEG,
        np.minimum(-xq, rq.small_max),
        np.where(
            region == Region.SMALL_POS,
            np.minimum(_shift_round(pos, rq.m0), rq.small_max),
            np.minimum(_shift_round(pos, rq.m1), rq.large_max),
        ),
    )
    return region.astype(np.int8), mag.astype(np.int64)


def decode_array(region: np.ndarray, magnitude: np.ndarray, rq: RegionQuantizer) -> np.ndarray:
    scale = np.where(region == Region.NEG, -rq.s0, np.where(region == Region.SMALL_POS, rq.s1, rq.s2))
    return (magnitude * scale).astype(np.float32)


def region_encode(x: float, rq: RegionQuantizer) -> RegionCode:
    region, mag = encode_array(np.array([x]), rq)
    return RegionCode(Region(int(region[0])), int(mag[0]))


def region_decode(code: RegionCode, rq: RegionQuantizer) -> float:
    scale = {Region.NEG: -rq.s0, Region.SMALL_POS: rq.s1, Region.LARGE_POS: rq.s2}[code.region]
    return code.magnitude * scale


def fake_region_quantize(x, rq: RegionQuantizer) -> np.ndarray:
    x = np.asarray(x)
    region, mag = encode_array(x, rq)
    return decode_array(region, mag, rq).reshape(x.shape)


# --------------------------------------------------------------------------
# Bit packing
# --------------------------------------------------------------------------


def _field_max(region: Region, bits: int) -> int:
    width = bits - 1 if region == Region.LARGE_POS else bits - 2
    return (1 << width) - 1


def pack_bits(code: RegionCode, bits: int) -> int:
    """Pack a region code into a ``bits``-wide unsigned word."""
    if not 0 <= code.magnitude <= _field_max(code.region, bits):
        raise EncodingError(f"magnitude {code.magnitude} overflows the {code.region.name} field at {bits} bits")
    if code.region == Region.LARGE_POS:
        return (1 << (bits - 1)) | code.magnitude
    if code.region == Region.NEG:
        return (1 << (bits - 2)) | code.magnitude
    return code.magnitude


def unpack_bits(word: int, bits: int) -> RegionCode:
    if not 0 <= word < (1 << bits):
        raise EncodingError(f"word {word} does not fit in {bits} bits")
    if word >> (bits - 1):
        return RegionCode(Region.LARGE_POS, word & ((1 << (bits - 1)) - 1))
    low = word & ((1 << (bits - 2)) - 1)
    if (word >> (bits - 2)) & 1:
        return RegionCode(Region.NEG, low)
    return RegionCode(Region.SMALL_POS, low)


def pack_codes(codes: Sequence[RegionCode], bits: int) -> bytes:
    """Concatenate packed words MSB-first into bytes, zero-padding the tail."""
    acc = 0
    for code in codes:
        acc = (acc << bits) | pack_bits(code, bits)
    nbits = bits * len(codes)
    pad = (-nbits) % 8
    return (acc << pad).to_bytes((nbits + pad) // 8, "big")


def unpack_codes(data: bytes, bits: int, count: int) -> list[RegionCode]:
    acc = int.from_bytes(data, "big")
    total = len(data) * 8
    if count * bits > total:
        raise EncodingError("not enough bytes for the requested code count")
    acc >>= total - count * bits
    mask = (1 << bits) - 1
    words = [(acc >> (bits * (count - 1 - i))) & mask for i in range(count)]
    return [unpack_bits(w, bits) for w in words]


# --------------------------------------------------------------------------
# Fitting
# --------------------------------------------------------------------------


class _SortedCalib:
    """Sorted calibration values with prefix sums of x and x^2.

    Wide codes are nondecreasing in x, so every code owns a contiguous run of
    the sorted values and its (count, sum x, sum x^2) come from prefix-sum
    differences; the cost per s0 candidate scales with the number of occupied
    codes instead of the number of values.
    """

    def __init__(self, calib):
        self.xs = np.sort(np.asarray(calib, dtype=np.float64).ravel())
        self.c1 = np.concatenate([[0.0], np.cumsum(self.xs)])
        self.c2 = np.concatenate([[0.0], np.cumsum(self.xs * self.xs)])

    @property
    def n(self) -> int:
        return self.xs.size

    def code_sums(self, rq: RegionQuantizer):
        """Occupied wide codes with their element count, sum and sum of squares."""
        xs = self.xs
        lo, hi = (int(c) for c in wide_codes(xs[[0, -1]], rq))
        codes = np.arange(lo, hi + 1)
        # first guess from the real-valued rounding edges, then exact fix-up so
        # that end[k] == #{x : wide_code(x) <= k} under wide_codes' own arithmetic
        end = np.searchsorted(xs, (codes + 0.5) * rq.s0, side="left")
        end[-1] = xs.size
        while True:
            prev = np.maximum(end - 1, 0)
            too_far = (end > 0) & (wide_codes(xs[prev], rq) > codes)
            nxt = np.minimum(end, xs.size - 1)
            too_short = (end < xs.size) & (wide_codes(xs[nxt], rq) <= codes)
            if not (too_far.any() or too_short.any()):
                break
            end = np.where(too_far, np.searchsorted(xs, xs[prev], side="left"), end)
            end = np.where(too_short, np.searchsorted(xs, xs[nxt], side="right"), end)
        start = np.concatenate([[0], end[:-1]])
        count = end - start
        keep = count > 0
        return (
            codes[keep],
            count[keep].astype(np.float64),
            (self.c1[end] - self.c1[start])[keep],
            (self.c2[end] - self.c2[start])[keep],
        )


def _search_m0(calib: np.ndarray, bits: int, s0: float, m1: int, metric: Metric, sorted_calib=None):
    if metric is mse:
        sc = sorted_calib if sorted_calib is not None else _SortedCalib(calib)
        return _search_m0_mse(sc, bits, s0, m1)
    # the wide grid depends only on (s0, bits, m1), so round once for all m0 candidates
    xq = wide_codes(calib, RegionQuantizer(bits, s0, 0, m1))
    best_m, best_err = 0, math.inf
    for m in range(m1):
        rq = RegionQuantizer(bits, s0, m, m1)
        region, mag = _encode_wide(xq, rq)
        err = metric(calib, decode_array(region, mag, rq).reshape(calib.shape))
        if err < best_err:
            best_m, best_err = m, err
    return best_m, best_err


def _search_m0_mse(sc: _SortedCalib, bits: int, s0: float, m1: int) -> tuple[int, float]:
    # MSE only depends on per-wide-code sums: n, sum(x), sum(x^2)
    codes, count, sx, sxx = sc.code_sums(RegionQuantizer(bits, s0, 0, m1))
    best_m, best_err = 0, math.inf
    for m in range(m1):
        rq = RegionQuantizer(bits, s0, m, m1)
        region, mag = _encode_wide(codes, rq)
        v = decode_array(region, mag, rq).astype(np.float64)
        err = max(float(np.sum(sxx - 2.0 * v * sx + count * v * v)) / sc.n, 0.0)
        if err < best_err:
            best_m, best_err = m, err
    return best_m, best_err


def compute_m0(calib, bits: int, s0: float, m1: int, metric: Metric = mse) -> int:
    """argmin over m in [0, m1) of ``metric(calib, quantized)``; ties go to the smaller m."""
    return _search_m0(np.asarray(calib), bits, s0, m1, metric)[0]


def s0_grid(calib, bits: int, size: int = S0_GRID_SIZE, span: float = S0_GRID_SPAN) -> np.ndarray:
    """``size`` equally spaced candidates in ``(0, span * max|calib| / 2^(bits-1)]``."""
    peak = float(np.max(np.abs(calib)))
    if peak == 0:
        raise FitError("cannot fit s0 on an all-zero tensor")
    base = peak / (1 << (bits - 1))
    return span * base * np.arange(1, size + 1) / size


def fit_s0(
    calib,
    bits: int,
    stats: GeluStats | None = None,
    metric: Metric = mse,
    grid_size: int = S0_GRID_SIZE,
) -> RegionQuantizer:
    """Grid-search s0 (m1 fixed from ``stats``, m0 re-searched per candidate).

    ``stats`` defaults to statistics of ``calib`` treated as a single sample.
    Returns the first candidate reaching the minimum metric.
    """
    calib = np.asarray(calib, dtype=np.float32)
    if calib.size == 0:
        raise QuantInputError("empty calibration tensor")
    if stats is None:
        stats = collect_gelu_stats([calib])
    m1 = compute_m1(stats, bits)
    sorted_calib = _SortedCalib(calib) if metric is mse else None
    best, best_err = None, math.inf
    for s0 in s0_grid(calib, bits, grid_size):
        s0 = float(s0)
        m0, err = _search_m0(calib, bits, s0, m1, metric, sorted_calib)
        if err < best_err:
            best, best_err = RegionQuantizer(bits, s0, m0, m1), err
    return best
