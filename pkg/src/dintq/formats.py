"""Number formats: uniform INT-b, integer-with-denormal dINT-b, and FP4 (1-e-m).

Codes are small non-negative integers. For dINT-b the uniform grid uses codes
``0..p`` with ``p = 2**b - 3`` and the two reserved symbols sit just above it:
``C1 = 2**b - 2`` (positive special) and ``C2 = 2**b - 1`` (negative special).
FP4 codes are the raw 4-bit patterns ``sign | exponent | mantissa``.

Every codec comes in a vectorized form (``dint_encode`` and friends, operating
on broadcastable arrays of steps and zero points) and a scalar form taking a
:class:`QuantParams`.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass
from functools import lru_cache

import numpy as np


class FormatKind(enum.Enum):
    UNIFORM_INT = "int"
    DENORM_INT = "dint"
    FLOAT4 = "fp4"


SPECIAL_RATIOS = (0.5, 0.25, 0.125)


@dataclass(frozen=True)
class QuantFormat:
    kind: FormatKind
    bits: int = 4
    special_ratio: float = 0.5
    exp_bits: int = 0
    man_bits: int = 0

    def __post_init__(self):
        if self.kind is FormatKind.FLOAT4:
            if self.bits != 4:
                raise ValueError("FP4 formats are 4 bits wide")
            if self.exp_bits < 1 or self.man_bits < 0 or self.exp_bits + self.man_bits != 3:
                raise ValueError("FP4 needs e >= 1 and 1 + e + m == 4")
            return
        if not 2 <= self.bits <= 8:
            raise ValueError(f"bit width must be in 2..8, got {self.bits}")
        if self.kind is FormatKind.DENORM_INT:
            if self.bits < 3:
                raise ValueError("dINT needs at least 3 bits")
            if self.special_ratio not in SPECIAL_RATIOS:
                raise ValueError(f"special_ratio must be one of {SPECIAL_RATIOS}")

    @classmethod
    def int(cls, bits: int) -> "QuantFormat":
        return cls(FormatKind.UNIFORM_INT, bits)

    @classmethod
    def dint(cls, bits: int, special_ratio: float = 0.5) -> "QuantFormat":
        return cls(FormatKind.DENORM_INT, bits, special_ratio)

    @classmethod
    def fp4(cls, exp_bits: int, man_bits: int) -> "QuantFormat":
        return cls(FormatKind.FLOAT4, 4, exp_bits=exp_bits, man_bits=man_bits)

    @property
    def levels(self) -> int:
        """Number of uniform steps spanned by the calibrated range."""
        if self.kind is FormatKind.UNIFORM_INT:
            return (1 << self.bits) - 1
        if self.kind is FormatKind.DENORM_INT:
            return (1 << self.bits) - 3
        raise ValueError("FP4 has no uniform grid")

    @property
    def c1(self) -> int:
        return (1 << self.bits) - 2

    @property
    def c2(self) -> int:
        return (1 << self.bits) - 1

    @property
    def name(self) -> str:
        if self.kind is FormatKind.FLOAT4:
            return f"fp4-e{self.exp_bits}m{self.man_bits}"
        if self.kind is FormatKind.DENORM_INT and self.special_ratio != 0.5:
            return f"dint{self.bits}@{self.special_ratio:g}"
        return f"{self.kind.value}{self.bits}"

    def __str__(self) -> str:
        return self.name


_FMT_RE = re.compile(r"^(d?int)([2-8])(?:@([0-9.]+))?$")
_FP4_RE = re.compile(r"^fp4(?:[-_]?e([0-3])m([0-3]))?$")


def parse_format(text: str) -> QuantFormat:
    """Parse ``int4``, ``dint4``, ``dint4@0.25``, ``fp4`` (= ``fp4-e3m0``) or ``fp4-e2m1``."""
    t = text.strip().lower()
    m = _FMT_RE.match(t)
    if m:
        kind, bits, ratio = m.groups()
        if kind == "int":
            if ratio is not None:
                raise ValueError(f"special ratio only applies to dINT: {text!r}")
            return QuantFormat.int(int(bits))
        return QuantFormat.dint(int(bits), float(ratio) if ratio else 0.5)
    m = _FP4_RE.match(t)
    if m:
        e, mant = m.groups()
        return QuantFormat.fp4(int(e), int(mant)) if e is not None else QuantFormat.fp4(3, 0)
    raise ValueError(f"unknown format {text!r}")


@dataclass(frozen=True)
class QuantParams:
    """Step ``s``, integer zero point ``z`` and the format of one quantization group.

    ``offset`` is added after dequantization; it is nonzero only for constant
    groups, which are stored as ``s=1, z=0`` plus the constant.
    """

    step: float
    zero_point: int
    format: QuantFormat
    offset: float = 0.0

    def __post_init__(self):
        if not (self.step > 0 and math.isfinite(self.step)):
            raise ValueError(f"step must be positive and finite, got {self.step}")
        if self.format.kind is FormatKind.FLOAT4:
            if self.zero_point != 0:
                raise ValueError("FP4 params are symmetric (zero point 0)")
        elif not 0 <= self.zero_point <= self.format.levels:
            raise ValueError(f"zero point {self.zero_point} outside 0..{self.format.levels}")


def uniform_levels(fmt: QuantFormat) -> int:
    """``p = 2**b - 3``, the largest uniform code of a dINT format."""
    if fmt.kind is not FormatKind.DENORM_INT:
        raise ValueError(f"uniform_levels applies to dINT formats, not {fmt.name}")
    return fmt.levels


# -- vectorized codecs --------------------------------------------------------

def _require_finite(x) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")


def uniform_encode(x, step, zero, bits: int) -> np.ndarray:
    _require_finite(x)
    qmax = (1 << bits) - 1
    return np.clip(np.rint(np.asarray(x, np.float64) / step) + zero, 0, qmax).astype(np.int64)


def uniform_decode(codes, step, zero) -> np.ndarray:
    return (np.asarray(codes, np.int64) - zero) * np.asarray(step, np.float64)


def dint_encode(x, step, zero, bits: int, special_ratio: float = 0.5) -> np.ndarray:
    """Nearest-grid code with the two special bins around ``±special_ratio * step``.

    The positive special takes ``ratio*s/2 < x <= 3*ratio*s/2`` and the
    negative special ``-3*ratio*s/2 <= x < -ratio*s/2``; everything else is
    ``clamp(rint(x/s) + z, 0, p)``.
    """
    _require_finite(x)
    x = np.asarray(x, np.float64)
    step = np.asarray(step, np.float64)
    p = (1 << bits) - 3
    lo = special_ratio * step * 0.5
    hi = special_ratio * step * 1.5
    codes = np.clip(np.rint(x / step) + zero, 0, p).astype(np.int64)
    codes = np.where((x > lo) & (x <= hi), p + 1, codes)
    codes = np.where((x >= -hi) & (x < -lo), p + 2, codes)
    return codes


def dint_decode(codes, step, zero, bits: int, special_ratio: float = 0.5) -> np.ndarray:
    codes = np.asarray(codes, np.int64)
    step = np.asarray(step, np.float64)
    p = (1 << bits) - 3
    if np.any((codes < 0) | (codes > p + 2)):
        raise ValueError("dINT code out of range")
    out = (codes - zero) * step
    special = special_ratio * step
    out = np.where(codes == p + 1, special, out)
    out = np.where(codes == p + 2, -special, out)
    return out


@lru_cache(maxsize=None)
def _fp4_table(exp_bits: int, man_bits: int) -> np.ndarray:
    bias = (1 << (exp_bits - 1)) - 1
    vals = np.empty(16)
    for code in range(16):
        sign = -1.0 if code >> 3 else 1.0
        e = (code >> man_bits) & ((1 << exp_bits) - 1)
        m = code & ((1 << man_bits) - 1)
        frac = m / (1 << man_bits)
        mag = 2.0 ** (1 - bias) * frac if e == 0 else 2.0 ** (e - bias) * (1.0 + frac)
        vals[code] = sign * mag
    vals.setflags(write=False)
    return vals


@lru_cache(maxsize=None)
def _fp4_search_order(exp_bits: int, man_bits: int) -> np.ndarray:
    vals = _fp4_table(exp_bits, man_bits)
    # smaller magnitude first so argmin breaks ties toward it; +0 before -0
    order = sorted(range(16), key=lambda c: (abs(vals[c]), c >> 3))
    return np.array(order, dtype=np.int64)


def fp4_values(fmt: QuantFormat) -> list[float]:
    """The 16 unscaled codebook values in ascending order (``±0`` both present)."""
    if fmt.kind is not FormatKind.FLOAT4:
        raise ValueError(f"{fmt.name} is not an FP4 format")
    return sorted(_fp4_table(fmt.exp_bits, fmt.man_bits).tolist())


def fp4_max(fmt: QuantFormat) -> float:
    return float(np.max(_fp4_table(fmt.exp_bits, fmt.man_bits)))


def fp4_encode(x, scale, exp_bits: int, man_bits: int) -> np.ndarray:
    _require_finite(x)
    table = _fp4_table(exp_bits, man_bits)
    order = _fp4_search_order(exp_bits, man_bits)
    u = np.asarray(x, np.float64) / np.asarray(scale, np.float64)
    dist = np.abs(u[..., None] - table[order])
    return order[np.argmin(dist, axis=-1)]


def fp4_decode(codes, scale, exp_bits: int, man_bits: int) -> np.ndarray:
    codes = np.asarray(codes, np.int64)
    if np.any((codes < 0) | (codes > 15)):
        raise ValueError("FP4 code out of range")
    return _fp4_table(exp_bits, man_bits)[codes] * np.asarray(scale, np.float64)


def encode(x, step, zero, fmt: QuantFormat, offset=0.0) -> np.ndarray:
    """Vectorized encode for any format; ``step``/``zero``/``offset`` broadcast against ``x``."""
    x = np.asarray(x, np.float64) - offset
    if fmt.kind is FormatKind.UNIFORM_INT:
        return uniform_encode(x, step, zero, fmt.bits)
    if fmt.kind is FormatKind.DENORM_INT:
        return dint_encode(x, step, zero, fmt.bits, fmt.special_ratio)
    return fp4_encode(x, step, fmt.exp_bits, fmt.man_bits)


def decode(codes, step, zero, fmt: QuantFormat, offset=0.0) -> np.ndarray:
    if fmt.kind is FormatKind.UNIFORM_INT:
        codes = np.asarray(codes, np.int64)
        if np.any((codes < 0) | (codes > fmt.c2)):
            raise ValueError("INT code out of range")
        out = uniform_decode(codes, step, zero)
    elif fmt.kind is FormatKind.DENORM_INT:
        out = dint_decode(codes, step, zero, fmt.bits, fmt.special_ratio)
    else:
        out = fp4_decode(codes, step, fmt.exp_bits, fmt.man_bits)
    return out + offset


def representable_values(qp: QuantParams) -> np.ndarray:
    """Every value the params can dequantize to, ascending (duplicates removed)."""
    fmt = qp.format
    n_codes = 16 if fmt.kind is FormatKind.FLOAT4 else (
        fmt.levels + 1 if fmt.kind is FormatKind.UNIFORM_INT else fmt.levels + 3)
    codes = np.arange(n_codes)
    return np.unique(decode(codes, qp.step, qp.zero_point, fmt, qp.offset))


# -- scalar forms -------------------------------------------------------------

def _check_kind(qp: QuantParams, kind: FormatKind) -> None:
    if qp.format.kind is not kind:
        raise ValueError(f"expected a {kind.value} format, got {qp.format.name}")


def encode_dint(x: float, qp: QuantParams) -> int:
    _check_kind(qp, FormatKind.DENORM_INT)
    return int(encode(x, qp.step, qp.zero_point, qp.format, qp.offset))


def decode_dint(code: int, qp: QuantParams) -> float:
    _check_kind(qp, FormatKind.DENORM_INT)
    return float(decode(code, qp.step, qp.zero_point, qp.format, qp.offset))


def encode_uniform(x: float, qp: QuantParams) -> int:
    _check_kind(qp, FormatKind.UNIFORM_INT)
    return int(encode(x, qp.step, qp.zero_point, qp.format, qp.offset))


def decode_uniform(code: int, qp: QuantParams) -> float:
    _check_kind(qp, FormatKind.UNIFORM_INT)
    return float(decode(code, qp.step, qp.zero_point, qp.format, qp.offset))


def encode_fp4(x: float, scale: float, fmt: QuantFormat) -> int:
    if fmt.kind is not FormatKind.FLOAT4:
        raise ValueError(f"{fmt.name} is not an FP4 format")
    if not scale > 0:
        raise ValueError("scale must be positive")
    return int(fp4_encode(x, scale, fmt.exp_bits, fmt.man_bits))


def decode_fp4(code: int, scale: float, fmt: QuantFormat) -> float:
    if fmt.kind is not FormatKind.FLOAT4:
        raise ValueError(f"{fmt.name} is not an FP4 format")
    return float(fp4_decode(code, scale, fmt.exp_bits, fmt.man_bits))
