"""Two's-complement fixed-point arithmetic.

A :class:`QFormat` describes a signed encoding with ``total_bits`` bits of
which ``frac_bits`` are fractional, so ``value = raw * 2**-frac_bits``.
Every conversion rounds half away from zero and saturates on overflow.

The scalar functions accept Python numbers and return Python ints; passing a
numpy array returns an ``int64`` array of the same shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ROUNDING = "half_away_from_zero"

INT64_MIN = -(1 << 63)
INT64_MAX = (1 << 63) - 1


@dataclass(frozen=True)
class QFormat:
    total_bits: int
    frac_bits: int

    def __post_init__(self):
        if not 2 <= self.total_bits <= 32:
            raise ValueError(f"total_bits must be in [2, 32], got {self.total_bits}")
        if not 0 <= self.frac_bits <= self.total_bits - 1:
            raise ValueError(
                f"frac_bits must be in [0, {self.total_bits - 1}], got {self.frac_bits}"
            )

    @property
    def raw_min(self) -> int:
        return -(1 << (self.total_bits - 1))

    @property
    def raw_max(self) -> int:
        return (1 << (self.total_bits - 1)) - 1

    @property
    def int_bits(self) -> int:
        return self.total_bits - 1 - self.frac_bits

    @property
    def ulp(self) -> float:
        return 2.0 ** -self.frac_bits

    @property
    def min_value(self) -> float:
        return self.raw_min * self.ulp

    @property
    def max_value(self) -> float:
        return self.raw_max * self.ulp

    def __str__(self):
        return f"Q{self.total_bits}.{self.frac_bits}"

    def to_dict(self) -> dict:
        return {"total_bits": self.total_bits, "frac_bits": self.frac_bits}

    @classmethod
    def from_dict(cls, d: dict) -> "QFormat":
        return cls(int(d["total_bits"]), int(d["frac_bits"]))


@dataclass(frozen=True)
class WideAcc:
    """Exact 64-bit accumulator; ``frac_bits`` is the product fraction width."""

    raw: int
    frac_bits: int

    @property
    def value(self) -> float:
        return self.raw * 2.0 ** -self.frac_bits


def _round_half_away(y):
    """Round float(s) half away from zero without the ``y + 0.5`` precision trap."""
    r = np.trunc(y)
    with np.errstate(invalid="ignore"):  # inf - inf; the clip saturates it anyway
        adj = (np.abs(y - r) >= 0.5).astype(np.float64)
    return r + np.copysign(adj, y)


def quantize(x, q: QFormat):
    """Quantize ``x`` to a raw integer of format ``q`` (round, then saturate)."""
    arr = np.asarray(x, dtype=np.float64)
    if np.isnan(arr).any():
        raise ValueError("cannot quantize NaN")
    with np.errstate(over="ignore"):
        y = _round_half_away(np.ldexp(arr, q.frac_bits))
    raw = np.clip(y, q.raw_min, q.raw_max).astype(np.int64)
    if np.ndim(x) == 0 and not isinstance(x, np.ndarray):
        return int(raw)
    return raw


def saturation_mask(x, q: QFormat) -> np.ndarray:
    """Elements of ``x`` that fall outside ``q``'s range after rounding."""
    with np.errstate(over="ignore"):
        y = _round_half_away(np.ldexp(np.asarray(x, dtype=np.float64), q.frac_bits))
    return (y < q.raw_min) | (y > q.raw_max)


def _check_range(raw, q: QFormat):
    arr = np.asarray(raw)
    if arr.size and (arr.min() < q.raw_min or arr.max() > q.raw_max):
        raise ValueError(f"raw value out of range for {q}")


def dequantize(raw, q: QFormat):
    """Return ``raw * 2**-frac`` exactly (float64 holds every 32-bit raw)."""
    _check_range(raw, q)
    if isinstance(raw, np.ndarray):
        return np.ldexp(raw.astype(np.float64), -q.frac_bits)
    return math.ldexp(float(int(raw)), -q.frac_bits)


def shift_round(raw, shift: int):
    """Arithmetic right shift by ``shift`` bits, rounding half away from zero.

    A negative ``shift`` multiplies by ``2**-shift`` instead. No saturation.
    Works on Python ints (arbitrary precision) and int64 arrays.
    """
    if isinstance(raw, np.ndarray):
        raw = raw.astype(np.int64, copy=False)
        if shift <= 0:
            return raw << -shift
        # floor((x + h - [x < 0]) / 2**k) == sign(x) * floor((|x| + h) / 2**k)
        return (raw + ((1 << (shift - 1)) - (raw < 0))) >> shift
    raw = int(raw)
    if shift <= 0:
        return raw << -shift
    mag = (abs(raw) + (1 << (shift - 1))) >> shift
    return -mag if raw < 0 else mag


def saturate(raw, q: QFormat):
    if isinstance(raw, np.ndarray):
        return np.clip(raw, q.raw_min, q.raw_max)
    return min(max(int(raw), q.raw_min), q.raw_max)


def requantize_wide(raw, from_frac: int, to: QFormat):
    """Move ``raw`` (any width, ``from_frac`` fraction bits) into format ``to``."""
    return saturate(shift_round(raw, from_frac - to.frac_bits), to)


def requantize(raw, src: QFormat, dst: QFormat):
    _check_range(raw, src)
    return requantize_wide(raw, src.frac_bits, dst)


def mac(a_raw: int, a_q: QFormat, b_raw: int, b_q: QFormat, acc: WideAcc) -> WideAcc:
    """Exact multiply-accumulate ``acc + a * b`` at ``a.frac + b.frac`` fraction bits."""
    if acc.frac_bits != a_q.frac_bits + b_q.frac_bits:
        raise ValueError(
            f"accumulator frac {acc.frac_bits} != {a_q.frac_bits} + {b_q.frac_bits}"
        )
    total = acc.raw + int(a_raw) * int(b_raw)
    if not INT64_MIN <= total <= INT64_MAX:
        raise OverflowError("64-bit accumulator overflow")
    return WideAcc(total, acc.frac_bits)


def acc_bound(n_terms: int, a_q: QFormat, b_q: QFormat) -> int:
    """Largest |sum| of ``n_terms`` products of in-range raws."""
    return n_terms * (-a_q.raw_min) * (-b_q.raw_min)


def check_acc_width(n_terms: int, a_q: QFormat, b_q: QFormat, bias_mag: int = 0):
    if acc_bound(n_terms, a_q, b_q) + bias_mag > INT64_MAX:
        raise OverflowError(
            f"{n_terms} products of {a_q} x {b_q} can overflow a 64-bit accumulator"
        )
