"""Stateless quantization arithmetic.

Everything here is a pure function of its arguments. Rounding to nearest is
round-half-away-from-zero throughout; "Int" in the shift path is floor, which
is what an arithmetic right shift computes.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

# A batch-normalized activation is assumed to live in [-CLIP, +CLIP].
CLIP = 4.0

_INV_SQRT2 = 0.7071067811865476  # fl(2**-0.5) is above the true value
INT32_MIN = -(2**31)
INT32_MAX = 2**31 - 1


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""


class ParameterError(ValueError):
    """Derived parameter cannot be represented."""


class ShiftClampWarning(UserWarning):
    """A negative shift was clamped to zero."""


@dataclass(frozen=True)
class QuantSpec:
    """Uniform quantizer for a batch-normalized tensor.

    Signed tensors clip to [-4, 4] and map onto [-2^(N-1)+1, 2^(N-1)-1]; the
    most negative code is never used. Unsigned tensors (ReLU fused) clip to
    [0, 4] and map onto [0, 2^N - 1]. Scales are rounded to powers of two so
    that division becomes a shift.
    """

    bitwidth: int
    signed: bool = True

    def __post_init__(self):
        if int(self.bitwidth) != self.bitwidth or self.bitwidth < 2:
            raise ValueError(f"bitwidth must be an integer >= 2, got {self.bitwidth}")

    @property
    def alpha(self) -> float:
        return -CLIP if self.signed else 0.0

    @property
    def beta(self) -> float:
        return CLIP

    @property
    def zero_point(self) -> float:
        # unsigned codes start at the clip floor, so real 0 maps to code 0
        return 0.0

    @property
    def scale_exponent(self) -> int:
        return 3 - self.bitwidth if self.signed else 2 - self.bitwidth

    @property
    def scale(self) -> float:
        return 2.0**self.scale_exponent

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bitwidth - 1)) + 1 if self.signed else 0

    @property
    def qmax(self) -> int:
        return 2 ** (self.bitwidth - 1) - 1 if self.signed else 2**self.bitwidth - 1


def round_half_away(x):
    """Round to nearest, ties away from zero. Exact for every float."""
    x = np.asarray(x, dtype=np.float64)
    t = np.trunc(x)
    bump = np.abs(x - t) >= 0.5
    out = t + np.sign(x) * bump
    return out if out.ndim else float(out)


def ap2(x):
    """Nearest integer to log2(x).

    Computed from the binary exponent and mantissa, so the result is exact for
    every positive finite float (a true tie would need x = 2^(k+1/2), which no
    float equals).
    """
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise DomainError(f"ap2 needs positive finite input, got {x!r}")
    m, e = np.frexp(arr)
    out = np.where(m >= _INV_SQRT2, e, e - 1).astype(np.int64)
    return out if out.ndim else int(out)


def uniform_quantize(act, spec: QuantSpec, rounding: str = "nearest"):
    """Map reals onto the integer grid of ``spec``, saturating.

    ``rounding`` is "nearest" (half away from zero) or "floor"; the shift-based
    integer path corresponds to "floor".
    """
    q = (np.asarray(act, dtype=np.float64) - spec.zero_point) / spec.scale
    if rounding == "nearest":
        q = round_half_away(q)
    elif rounding == "floor":
        q = np.floor(q)
    else:
        raise ValueError(f"unknown rounding mode {rounding!r}")
    out = np.clip(q, spec.qmin, spec.qmax).astype(np.int64)
    return out if out.ndim else int(out)


@dataclass(frozen=True)
class MulShiftApprox:
    """1/S approximated as multiplier * 2^-shift_amount."""

    multiplier: int
    shift_amount: int

    def apply(self, x):
        """Real-valued product, for measuring approximation quality."""
        return np.asarray(x, dtype=np.float64) * self.multiplier / 2.0**self.shift_amount

    def apply_int(self, x):
        """(x * M) >> m on integers."""
        return (np.asarray(x, dtype=np.int64) * self.multiplier) >> self.shift_amount

    def relative_error(self, scale: float) -> float:
        exact = 1 / Fraction(scale)
        approx = Fraction(self.multiplier, 2**self.shift_amount)
        return float(abs(approx - exact) / exact)


def mulshift_from_scale(scale: float, target_shift: int) -> MulShiftApprox:
    if not scale > 0 or not math.isfinite(scale):
        raise DomainError(f"scale must be positive, got {scale}")
    if not 0 <= target_shift <= 31:
        raise ParameterError(f"target_shift must be in [0, 31], got {target_shift}")
    ratio = Fraction(2**target_shift) / Fraction(scale)
    m = math.floor(ratio + Fraction(1, 2))  # ratio > 0, so this is half-away
    if m < 1 or m > INT32_MAX:
        raise ParameterError(
            f"multiplier {m} for scale={scale}, shift={target_shift} is not a positive int32"
        )
    return MulShiftApprox(int(m), int(target_shift))


def sbn_float(act, mu: float, sigma: float):
    """Shift-based batch norm without the floor: (act - round(mu)) / 2^ap2(sigma)."""
    if not sigma > 0:
        raise DomainError(f"sigma must be positive, got {sigma}")
    return (np.asarray(act, dtype=np.float64) - round_half_away(mu)) / 2.0 ** ap2(sigma)


@dataclass
class SbnqParams:
    """Per-channel integer buffers of a fused SBNQ layer."""

    bias: np.ndarray
    shift: np.ndarray
    signed_output: bool
    bits: int

    def __post_init__(self):
        self.bias = np.atleast_1d(np.asarray(self.bias, dtype=np.int64))
        self.shift = np.atleast_1d(np.asarray(self.shift, dtype=np.int64))
        if self.bias.shape != self.shift.shape or self.bias.ndim != 1:
            raise ValueError("bias and shift must be 1-D vectors of equal length")
        if np.any(self.bias < INT32_MIN) or np.any(self.bias > INT32_MAX):
            raise ParameterError("bias does not fit in 32 bits")
        if np.any(self.shift < 0) or np.any(self.shift > 31):
            raise ParameterError("shift must lie in [0, 31]")

    @property
    def spec(self) -> QuantSpec:
        return QuantSpec(self.bits, self.signed_output)

    @property
    def channels(self) -> int:
        return len(self.bias)


def raw_shift(sigma, spec: QuantSpec):
    """Exponent of 2^ap2(sigma) * S, the combined divisor of normalize-then-quantize.

    That is ap2(sigma) + 3 - N (signed) or ap2(sigma) + 2 - N (unsigned); it
    can be negative for small sigma.
    """
    return ap2(sigma) + spec.scale_exponent


def fused_shift(sigma, spec: QuantSpec):
    """raw_shift clamped at zero; right shifts only."""
    s = np.maximum(raw_shift(sigma, spec), 0)
    return s if np.ndim(s) else int(s)


def fuse_sbnq(mu, sigma, spec: QuantSpec, warn: bool = True) -> SbnqParams:
    """Fold moving-average statistics into integer (bias, shift) buffers.

    Accepts scalars or per-channel vectors.
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    if np.any(~(sigma > 0)):
        raise DomainError("sigma must be positive in every channel")
    if not np.all(np.isfinite(mu)):
        raise DomainError("mu must be finite")
    raw = np.atleast_1d(raw_shift(sigma, spec))
    if warn and np.any(raw < 0):
        warnings.warn(
            f"{int(np.sum(raw < 0))} channel(s) had negative shift; clamped to 0",
            ShiftClampWarning,
            stacklevel=2,
        )
    bias = np.atleast_1d(round_half_away(mu)).astype(np.int64)
    return SbnqParams(bias, np.maximum(raw, 0), spec.signed, spec.bitwidth)


def sbnq_int(act, params: SbnqParams, channel: int | None = None):
    """Integer SBNQ: (act - bias) >> shift, ReLU before the shift when unsigned.

    With ``channel`` given, ``act`` is scalar or array for that channel alone.
    Without it, ``act`` is laid out channel-first after the batch axis
    (N, C, ...) or is a (C,) vector.
    """
    a = np.asarray(act, dtype=np.int64)
    if np.any(a < INT32_MIN) or np.any(a > INT32_MAX):
        raise OverflowError("sbnq_int input outside the 32-bit range")
    if channel is not None:
        bias, shift = params.bias[channel], params.shift[channel]
    else:
        bcast = (params.channels,) + (1,) * (a.ndim - 2) if a.ndim >= 2 else (params.channels,)
        bias, shift = params.bias.reshape(bcast), params.shift.reshape(bcast)
    d = a - bias
    if not params.signed_output:
        d = np.maximum(d, 0)
    spec = params.spec
    out = np.clip(d >> shift, spec.qmin, spec.qmax)
    return out if out.ndim else int(out)


def quantize_weight(w, bits: int):
    """Round to nearest and saturate to [-2^(N-1)+1, 2^(N-1)-1]."""
    spec = QuantSpec(bits, signed=True)
    out = np.clip(round_half_away(w), spec.qmin, spec.qmax).astype(np.int64)
    return out if out.ndim else int(out)


def weight_init_std(bits: int) -> float:
    """Weights drawn with this std make the integer clip range span about +-4 sigma."""
    return 2.0 ** (bits - 3)
