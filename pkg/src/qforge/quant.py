"""
Affine quantization: parameter computation, fake quantization for QAT and
integer requantization plans.

Rounding is fixed project-wide. Real-to-integer conversion rounds half away
from zero; integer requantization adds ``2**(shift-1)`` before an arithmetic
right shift (round half up). The integer runtime and the VHDL generator both
read the constants below, so simulator and hardware agree bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from .errors import ContractError, DegenerateRangeError, RequantUnderflowError
from .tensor import Tensor, straight_through

ACC_BITS = 32
MAX_SHIFT = 40
MULTIPLIER_BITS = 31
MIN_MULTIPLIER = 1 << 14
RANGE_WIDEN = 1e-6
OBSERVER_MOMENTUM = 0.01

SOFTMAX_FRAC_BITS = 8
SOFTMAX_GUARD_BITS = 16
LOG2_E = 1.0 / math.log(2.0)


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def int_range(bits: int) -> tuple:
    return -(1 << (bits - 1)), (1 << (bits - 1)) - 1


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int
    bits: int
    scheme: str = "asymmetric"

    def __post_init__(self):
        if not (2 <= self.bits <= ACC_BITS):
            raise ContractError(f"bitwidth must lie in [2, {ACC_BITS}], got {self.bits}")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ContractError(f"scale must be positive and finite, got {self.scale}")
        if self.scheme not in ("asymmetric", "symmetric"):
            raise ContractError(f"unknown scheme {self.scheme!r}")
        lo, hi = int_range(self.bits)
        if not lo <= self.zero_point <= hi:
            raise ContractError(f"zero point {self.zero_point} outside [{lo}, {hi}]")
        if self.scheme == "symmetric" and self.zero_point != 0:
            raise ContractError("symmetric quantization requires a zero point of 0")

    @property
    def qmin(self) -> int:
        return int_range(self.bits)[0]

    @property
    def qmax(self) -> int:
        return int_range(self.bits)[1]

    @property
    def real_min(self) -> float:
        return self.scale * (self.qmin - self.zero_point)

    @property
    def real_max(self) -> float:
        return self.scale * (self.qmax - self.zero_point)

    def to_dict(self) -> dict:
        return {"scale": self.scale, "zero_point": self.zero_point, "bits": self.bits, "scheme": self.scheme}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantParams":
        return cls(float(d["scale"]), int(d["zero_point"]), int(d["bits"]), d.get("scheme", "asymmetric"))


def qparams_asymmetric(alpha: float, beta: float, bits: int) -> QuantParams:
    if not beta > alpha:
        raise DegenerateRangeError(f"empty range [{alpha}, {beta}]")
    scale = _checked_scale(beta - alpha, (1 << bits) - 1)
    lo, hi = int_range(bits)
    z = round_half_away(((1 << (bits - 1)) - 1) - beta / scale)
    return QuantParams(scale, int(np.clip(z, lo, hi)), bits, "asymmetric")


def qparams_symmetric(alpha: float, beta: float, bits: int) -> QuantParams:
    amax = max(abs(alpha), abs(beta))
    if not amax > 0:
        raise DegenerateRangeError("all-zero range")
    return QuantParams(_checked_scale(amax, (1 << (bits - 1)) - 1), 0, bits, "symmetric")


def _checked_scale(span: float, levels: int) -> float:
    scale = span / levels
    if not scale >= np.finfo(np.float64).tiny:
        raise DegenerateRangeError(f"range of width {span!r} is too narrow for {levels} levels")
    return scale


def divide_round(x, scale: float) -> np.ndarray:
    """``round_half_away(x / scale)`` of the exact quotient. The float
    division can land on a .5 tie that the true quotient misses (or the
    reverse); those few entries are redone in rational arithmetic."""
    x = np.asarray(x, dtype=np.float64)
    r = x / scale
    q = round_half_away(r)
    a = np.abs(r)
    near = np.abs(a - np.floor(a) - 0.5) <= 8 * np.finfo(np.float64).eps * np.maximum(a, 1.0)
    if near.any():
        s = Fraction(scale)
        q = np.array(q)
        for j in np.flatnonzero(near):
            v = Fraction(float(x.flat[j])) / s
            fl = math.floor(v)
            up = v - fl > Fraction(1, 2) or (v - fl == Fraction(1, 2) and v > 0)
            q.flat[j] = fl + 1 if up else fl
    return q


def quantize(x, qp: QuantParams) -> np.ndarray:
    q = divide_round(x, qp.scale) + qp.zero_point
    return np.clip(q, qp.qmin, qp.qmax).astype(np.int64)


def dequantize(xq, qp: QuantParams) -> np.ndarray:
    return qp.scale * (np.asarray(xq, dtype=np.float64) - qp.zero_point)


def fake_quantize(x, qp: QuantParams) -> Tensor:
    """Quantize-dequantize in the forward pass; straight-through gradient
    inside the representable range, zero outside."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    value = dequantize(quantize(data, qp), qp)
    mask = (data >= qp.real_min) & (data <= qp.real_max)
    return straight_through(x, value, mask)


def round_to_grid(x, step: float) -> Tensor:
    """Unclamped rounding onto ``step * integer`` with identity gradient."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    return straight_through(x, round_half_away(data / step) * step)


class RangeObserver:
    """Running min/max of a tensor, smoothed by an exponential moving average.

    The read-out range always contains zero (so the zero point is exactly
    representable) and a collapsed range is widened by ``RANGE_WIDEN``.
    """

    def __init__(self, momentum: float = OBSERVER_MOMENTUM):
        self.momentum = momentum
        self.min: Optional[float] = None
        self.max: Optional[float] = None
        self.frozen = False

    @property
    def initialized(self) -> bool:
        return self.min is not None

    def observe(self, x) -> None:
        if self.frozen:
            return
        data = x.data if isinstance(x, Tensor) else np.asarray(x)
        lo, hi = float(data.min()), float(data.max())
        if self.min is None:
            self.min, self.max = lo, hi
        else:
            m = self.momentum
            self.min = (1 - m) * self.min + m * lo
            self.max = (1 - m) * self.max + m * hi

    def freeze(self) -> None:
        self.frozen = True

    def range(self) -> tuple:
        from .errors import StateError

        if self.min is None:
            raise StateError("observer has not seen any data")
        lo, hi = min(self.min, 0.0), max(self.max, 0.0)
        if hi - lo <= 0:
            lo, hi = lo - RANGE_WIDEN, hi + RANGE_WIDEN
        return lo, hi

    def qparams(self, bits: int) -> QuantParams:
        return qparams_asymmetric(*self.range(), bits)

    def to_dict(self) -> dict:
        return {"min": self.min, "max": self.max, "momentum": self.momentum, "frozen": self.frozen}

    @classmethod
    def from_dict(cls, d: dict) -> "RangeObserver":
        obs = cls(d.get("momentum", OBSERVER_MOMENTUM))
        obs.min, obs.max, obs.frozen = d["min"], d["max"], bool(d.get("frozen", False))
        return obs


def weight_qparams(w: np.ndarray, bits: int) -> QuantParams:
    lo, hi = min(float(w.min()), 0.0), max(float(w.max()), 0.0)
    if hi - lo <= 0:
        lo, hi = lo - RANGE_WIDEN, hi + RANGE_WIDEN
    return qparams_asymmetric(lo, hi, bits)


def bias_qparams(in_qp: QuantParams, w_qp: QuantParams) -> QuantParams:
    return QuantParams(in_qp.scale * w_qp.scale, 0, ACC_BITS, "symmetric")


# -- requantization -------------------------------------------------------
@dataclass(frozen=True)
class RequantPlan:
    """``y = ((acc * multiplier + 2**(shift-1)) >> shift) + Z_out``, clamped.

    ``out`` of ``None`` leaves the result unclamped with no zero point; the
    attention scores use that form for their fixed-point intermediate.
    """

    multiplier: int
    shift: int
    out: Optional[QuantParams]
    ratio: float

    def apply(self, acc) -> np.ndarray:
        y = apply_shift(np.asarray(acc, dtype=np.int64) * self.multiplier, self.shift)
        if self.out is None:
            return y
        return np.clip(y + self.out.zero_point, self.out.qmin, self.out.qmax)

    def to_dict(self) -> dict:
        return {
            "multiplier": self.multiplier,
            "shift": self.shift,
            "ratio": self.ratio,
            "out": None if self.out is None else self.out.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RequantPlan":
        out = None if d["out"] is None else QuantParams.from_dict(d["out"])
        return cls(int(d["multiplier"]), int(d["shift"]), out, float(d["ratio"]))


def apply_shift(product, shift: int) -> np.ndarray:
    """Arithmetic right shift with round-half-up."""
    product = np.asarray(product, dtype=np.int64)
    if shift == 0:
        return product
    return (product + (1 << (shift - 1))) >> shift


def choose_shift(max_ratio: float) -> int:
    """Largest shift (capped) keeping ``round(max_ratio * 2**shift) < 2**31``."""
    if not max_ratio > 0:
        raise ContractError(f"requantization ratio must be positive, got {max_ratio}")
    limit = 1 << MULTIPLIER_BITS
    shift = MAX_SHIFT
    while shift > 0 and round_half_away(max_ratio * 2.0**shift) >= limit:
        shift -= 1
    if round_half_away(max_ratio * 2.0**shift) >= limit:
        raise ContractError(f"requantization ratio {max_ratio} too large for a 31-bit multiplier")
    return shift


def plan_requant(real_ratio: float, out_qp: Optional[QuantParams], shift: Optional[int] = None) -> RequantPlan:
    if not real_ratio > 0:
        raise ContractError(f"requantization ratio must be positive, got {real_ratio}")
    s = choose_shift(real_ratio) if shift is None else int(shift)
    m = int(round_half_away(real_ratio * 2.0**s))
    if m == 0:
        raise RequantUnderflowError(f"ratio {real_ratio} underflows at shift {s}")
    return RequantPlan(m, s, out_qp, float(real_ratio))


@dataclass(frozen=True)
class AddPlan:
    """Two-operand add: both operands are rescaled to the output scale in a
    shared fixed-point intermediate, summed, rounded once and saturated."""

    multiplier_a: int
    multiplier_b: int
    shift: int
    out: QuantParams

    def apply(self, a_centered, b_centered) -> np.ndarray:
        acc = np.asarray(a_centered, dtype=np.int64) * self.multiplier_a + np.asarray(b_centered, dtype=np.int64) * self.multiplier_b
        y = apply_shift(acc, self.shift) + self.out.zero_point
        return np.clip(y, self.out.qmin, self.out.qmax)

    def to_dict(self) -> dict:
        return {"multiplier_a": self.multiplier_a, "multiplier_b": self.multiplier_b, "shift": self.shift, "out": self.out.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "AddPlan":
        return cls(int(d["multiplier_a"]), int(d["multiplier_b"]), int(d["shift"]), QuantParams.from_dict(d["out"]))


def plan_add(ratio_a: float, ratio_b: float, out_qp: QuantParams) -> AddPlan:
    s = choose_shift(max(ratio_a, ratio_b))
    ma = int(round_half_away(ratio_a * 2.0**s))
    mb = int(round_half_away(ratio_b * 2.0**s))
    return AddPlan(ma, mb, s, out_qp)


@dataclass(frozen=True)
class ChannelPlan:
    """Per-channel affine requantization used by folded BatchNorm:
    ``y_c = ((x_c * M_c + offset_c + 2**(shift-1)) >> shift) + Z_out``."""

    multipliers: np.ndarray
    offsets: np.ndarray
    shift: int
    out: QuantParams

    def apply(self, x_centered) -> np.ndarray:
        acc = np.asarray(x_centered, dtype=np.int64) * self.multipliers + self.offsets
        return np.clip(apply_shift(acc, self.shift) + self.out.zero_point, self.out.qmin, self.out.qmax)

    def to_dict(self) -> dict:
        return {
            "multipliers": [int(v) for v in self.multipliers],
            "offsets": [int(v) for v in self.offsets],
            "shift": self.shift,
            "out": self.out.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelPlan":
        return cls(
            np.array(d["multipliers"], dtype=np.int64),
            np.array(d["offsets"], dtype=np.int64),
            int(d["shift"]),
            QuantParams.from_dict(d["out"]),
        )


def plan_channels(ratios: np.ndarray, offsets_real: np.ndarray, out_qp: QuantParams) -> ChannelPlan:
    """``ratios`` scale centred input codes; ``offsets_real`` are in output LSBs."""
    ratios = np.asarray(ratios, dtype=np.float64)
    peak = float(np.abs(ratios).max())
    s = choose_shift(peak) if peak > 0 else MAX_SHIFT
    # keep |offset| well inside int64 once shifted
    while s > 0 and np.abs(offsets_real).max() * 2.0**s >= 2.0**52:
        s -= 1
    mult = round_half_away(ratios * 2.0**s).astype(np.int64)
    offs = round_half_away(np.asarray(offsets_real) * 2.0**s).astype(np.int64)
    return ChannelPlan(mult, offs, s, out_qp)
