"""Fixed-point formats and element-wise trainable quantizers.

Values are carried as float64 arrays whose elements are exact multiples of
``2**-f``.  A quantizer holds per-element state (trainable fractional bits,
calibrated integer bits, signedness) and a single overflow mode:

* ``WRAP`` reduces modulo the format range (a pure bit-slice in hardware).
* ``SAT`` clamps to the format range.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

WRAP = "WRAP"
SAT = "SAT"
TRN = "TRN"
RND = "RND"

LN2 = math.log(2.0)


class EncodingError(ValueError):
    """Raised when a value cannot be encoded in a fixed-point format."""


@dataclass(frozen=True, order=True)
class FxpFormat:
    signed: bool
    int_bits: int
    frac_bits: int

    @property
    def width(self) -> int:
        if self.int_bits + self.frac_bits < 0:
            return 0
        return self.int_bits + self.frac_bits + int(self.signed)

    @property
    def step(self) -> float:
        return 2.0 ** -self.frac_bits

    @property
    def raw_min(self) -> int:
        if self.width == 0:
            return 0
        return -(1 << (self.int_bits + self.frac_bits)) if self.signed else 0

    @property
    def raw_max(self) -> int:
        if self.width == 0:
            return 0
        return (1 << (self.int_bits + self.frac_bits)) - 1

    @property
    def min_value(self) -> float:
        return self.raw_min * self.step

    @property
    def max_value(self) -> float:
        return self.raw_max * self.step

    def contains(self, other: "FxpFormat") -> bool:
        """True if every value representable in ``other`` is representable here."""
        if other.width == 0:
            return True
        if self.width == 0 or other.frac_bits > self.frac_bits:
            return False
        return self.min_value <= other.min_value and other.max_value <= self.max_value

    def __str__(self) -> str:
        return f"{'s' if self.signed else 'u'}fxp<{self.int_bits},{self.frac_bits}>"


ZERO_FORMAT = FxpFormat(False, 0, 0)


def union_format(fmts: Iterable[FxpFormat]) -> FxpFormat | None:
    """Smallest format holding every value of every non-empty format given."""
    fmts = [f for f in fmts if f.width > 0]
    if not fmts:
        return None
    signed = any(f.signed for f in fmts)
    frac = max(f.frac_bits for f in fmts)
    # unsigned [0, 2^i) fits a signed container with the same int bits
    integer = max(f.int_bits for f in fmts)
    return FxpFormat(signed, integer, frac)


def minimal_format(raw: int, frac_bits: int) -> FxpFormat:
    """Narrowest format with ``frac_bits`` that holds the raw integer ``raw``."""
    if raw >= 0:
        return FxpFormat(False, raw.bit_length() - frac_bits, frac_bits)
    return FxpFormat(True, (-raw - 1).bit_length() - frac_bits, frac_bits)


def add_format(a: FxpFormat, b: FxpFormat) -> FxpFormat:
    """Exact result format of ``a + b``."""
    return FxpFormat(a.signed or b.signed, max(a.int_bits, b.int_bits) + 1,
                     max(a.frac_bits, b.frac_bits))


def sub_format(a: FxpFormat, b: FxpFormat) -> FxpFormat:
    return FxpFormat(True, max(a.int_bits, b.int_bits) + 1, max(a.frac_bits, b.frac_bits))


def mul_format(a: FxpFormat, b: FxpFormat) -> FxpFormat:
    signed = a.signed or b.signed
    return FxpFormat(signed, a.int_bits + b.int_bits + int(signed), a.frac_bits + b.frac_bits)


def to_bits(v: float, fmt: FxpFormat) -> int:
    """Encode a representable value as an unsigned ``fmt.width``-bit pattern."""
    if fmt.width == 0:
        if v != 0:
            raise EncodingError(f"{v!r} is not representable in zero-width {fmt}")
        return 0
    scaled = v * 2.0 ** fmt.frac_bits
    if not math.isfinite(scaled) or scaled != math.floor(scaled):
        raise EncodingError(f"{v!r} is not a multiple of the step of {fmt}")
    raw = int(scaled)
    if not fmt.raw_min <= raw <= fmt.raw_max:
        raise EncodingError(f"{v!r} is outside the range of {fmt}")
    return raw & ((1 << fmt.width) - 1)


def from_bits(b: int, fmt: FxpFormat) -> float:
    return raw_from_bits(b, fmt) * fmt.step


def raw_from_bits(b: int, fmt: FxpFormat) -> int:
    w = fmt.width
    if not 0 <= b < (1 << w):
        raise EncodingError(f"bit pattern {b} does not fit {w} bits")
    if fmt.signed and w and b >> (w - 1):
        return b - (1 << w)
    return b


def raw_to_bits(raw: int, fmt: FxpFormat) -> int:
    if not fmt.raw_min <= raw <= fmt.raw_max:
        raise EncodingError(f"raw value {raw} is outside the range of {fmt}")
    return raw & ((1 << fmt.width) - 1) if fmt.width else 0


def _round(v: np.ndarray, rounding: str) -> np.ndarray:
    if rounding == TRN:
        return np.floor(v)
    # half away from zero
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


@dataclass
class QuantizerState:
    """Per-element quantizer parameters.

    ``f_raw`` is the trainable, continuous fractional-bit parameter; the
    effective fractional bits are ``round(f_raw)`` clamped to
    ``[min_f, max_f]``.  Integer bits come from range calibration.
    """

    shape: tuple
    mode: str = WRAP
    rounding: str = TRN
    min_f: int = -8
    max_f: int = 12
    enabled: bool = True
    calibrated: bool = False
    f_raw: np.ndarray = field(default=None)
    i_cal: np.ndarray = field(default=None)
    signed: np.ndarray = field(default=None)

    def __post_init__(self):
        self.shape = tuple(self.shape)
        if self.mode not in (WRAP, SAT):
            raise ValueError(f"unknown overflow mode {self.mode!r}")
        if self.rounding not in (TRN, RND):
            raise ValueError(f"unknown rounding {self.rounding!r}")
        if self.f_raw is None:
            self.f_raw = np.full(self.shape, 6.0)
        if self.i_cal is None:
            self.i_cal = np.zeros(self.shape, dtype=np.int64)
        if self.signed is None:
            self.signed = np.zeros(self.shape, dtype=bool)
        self.f_raw = np.asarray(self.f_raw, dtype=np.float64).reshape(self.shape)
        self.i_cal = np.asarray(self.i_cal, dtype=np.int64).reshape(self.shape)
        self.signed = np.asarray(self.signed, dtype=bool).reshape(self.shape)

    @classmethod
    def from_formats(cls, fmts: np.ndarray, mode: str, rounding: str, **kw) -> "QuantizerState":
        """Build a state whose effective formats equal ``fmts`` (object array)."""
        fmts = np.asarray(fmts, dtype=object)
        return cls(
            fmts.shape, mode, rounding,
            f_raw=np.vectorize(lambda f: float(f.frac_bits), otypes=[float])(fmts),
            i_cal=np.vectorize(lambda f: f.int_bits, otypes=[np.int64])(fmts),
            signed=np.vectorize(lambda f: f.signed, otypes=[bool])(fmts),
            calibrated=True,
            **kw,
        )

    def copy(self) -> "QuantizerState":
        return copy.deepcopy(self)

    @property
    def frac_bits(self) -> np.ndarray:
        f = np.floor(self.f_raw + 0.5).astype(np.int64)
        return np.clip(f, self.min_f, self.max_f)

    @property
    def int_bits(self) -> np.ndarray:
        return self.i_cal

    @property
    def width(self) -> np.ndarray:
        total = self.i_cal + self.frac_bits
        return np.where(total < 0, 0, total + self.signed)

    def soft_width(self) -> tuple[np.ndarray, np.ndarray]:
        """Continuous width and its derivative with respect to ``f_raw``."""
        f = np.clip(self.f_raw, self.min_f, self.max_f)
        total = self.i_cal + f + self.signed
        inside = (self.f_raw >= self.min_f) & (self.f_raw <= self.max_f)
        return np.maximum(total, 0.0), ((total > 0) & inside).astype(np.float64)

    def format_at(self, idx) -> FxpFormat:
        f = int(self.frac_bits[idx])
        i = int(self.i_cal[idx])
        return FxpFormat(bool(self.signed[idx]), i, f)

    def formats(self) -> np.ndarray:
        out = np.empty(self.shape, dtype=object)
        for idx in np.ndindex(*self.shape):
            out[idx] = self.format_at(idx)
        return out


def quantize(x: np.ndarray, q: QuantizerState) -> np.ndarray:
    """Quantize ``x`` (shape ``(..., *q.shape)``) element-wise."""
    x = np.asarray(x, dtype=np.float64)
    if not q.enabled:
        return x.copy()
    f = q.frac_bits
    w = q.width
    scale = np.exp2(f.astype(np.float64))
    v = _round(x * scale, q.rounding)
    if q.mode == WRAP:
        span = np.exp2(w.astype(np.float64))
        lo = np.where(q.signed & (w > 0), -span / 2, 0.0)
        v = np.mod(v - lo, span) + lo
    else:
        top = np.exp2((q.i_cal + f).astype(np.float64))
        v = np.clip(v, np.where(q.signed, -top, 0.0), top - 1)
    out = v / scale
    return np.where(w > 0, out, 0.0)


def quantize_backward(upstream: np.ndarray, x: np.ndarray, q: QuantizerState,
                      xq: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Straight-through gradients for ``quantize``.

    Returns ``(grad_x, grad_f_raw)``; ``grad_f_raw`` is reduced over the
    leading (batch) axes to ``q.shape``.
    """
    if x is None:
        raise RuntimeError("quantize_backward called without a cached forward input")
    upstream = np.asarray(upstream, dtype=np.float64)
    if not q.enabled:
        return upstream.copy(), np.zeros(q.shape)
    if xq is None:
        xq = quantize(x, q)
    w = q.width
    grad_x = upstream
    if q.mode == SAT:
        f = q.frac_bits
        scale = np.exp2(f.astype(np.float64))
        top = np.exp2((q.i_cal + f).astype(np.float64))
        v = _round(x * scale, q.rounding)
        inside = (v >= np.where(q.signed, -top, 0.0)) & (v <= top - 1)
        grad_x = upstream * inside
    grad_x = np.where(w > 0, grad_x, 0.0)
    gf = upstream * LN2 * (x - xq)
    lead = tuple(range(gf.ndim - len(q.shape)))
    return grad_x, gf.sum(axis=lead) if lead else gf


def calibrate(x: np.ndarray, q: QuantizerState) -> QuantizerState:
    """Grow integer bits and signedness so the observed range of ``x`` fits."""
    x = np.asarray(x, dtype=np.float64)
    lead = tuple(range(x.ndim - len(q.shape)))
    xmax = np.abs(x).max(axis=lead) if lead else np.abs(x)
    xmin = x.min(axis=lead) if lead else x
    step = np.exp2(-q.frac_bits.astype(np.float64))
    need = np.ceil(np.log2(xmax + step)).astype(np.int64)
    out = q.copy()
    out.i_cal = np.maximum(q.i_cal, need)
    out.signed = q.signed | (xmin < 0)
    out.calibrated = True
    return out
