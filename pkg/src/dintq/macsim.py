"""Integer functional model of a dINT x INT8 multiply-accumulate datapath.

Weights are carried in units of ``r * s_w`` where ``r`` is the special ratio
(1/2 by default): a uniform code contributes ``(code - z_w) / r`` units and the
specials contribute ``+1`` / ``-1``. With ``r`` a power of two the uniform
contribution is a left shift of the special one, so the datapath never needs a
real multiplier for the specials. Products with ``a = code_x - z_x`` are summed
in a signed accumulator of ``acc_bits`` bits; leaving its range is an error,
never a wrap-around.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .formats import FormatKind, QuantFormat
from .quantizer import QuantizedTensor

ACC_BITS = 48
MAX_LENGTH = 1 << 20


class AccumulatorOverflow(OverflowError):
    pass


@dataclass(frozen=True)
class MacOperandW:
    codes: np.ndarray
    step: float
    zero: int
    format: QuantFormat = QuantFormat.dint(4)
    offset: float = 0.0

    def __post_init__(self):
        codes = np.asarray(self.codes, np.int64)
        if self.format.kind is FormatKind.FLOAT4:
            raise ValueError("FP4 weights are not supported by the integer MAC")
        if np.any((codes < 0) | (codes > self.format.c2)):
            raise ValueError(f"invalid {self.format.name} code")
        object.__setattr__(self, "codes", codes)


@dataclass(frozen=True)
class MacOperandX:
    codes: np.ndarray
    step: float
    zero: int
    bits: int = 8
    offset: float = 0.0

    def __post_init__(self):
        codes = np.asarray(self.codes, np.int64)
        if np.any((codes < 0) | (codes > (1 << self.bits) - 1)):
            raise ValueError(f"activation codes must lie in [0, {(1 << self.bits) - 1}]")
        object.__setattr__(self, "codes", codes)


def unit_shift(fmt: QuantFormat) -> int:
    """Left shift applied to uniform weight contributions (log2 of 1/r); 0 for plain INT."""
    if fmt.kind is FormatKind.DENORM_INT:
        return int(round(-np.log2(fmt.special_ratio)))
    return 0


def weight_units(codes, zero, fmt: QuantFormat) -> np.ndarray:
    """Integer weight contributions in units of ``r * s_w`` (``s_w`` for INT)."""
    codes = np.asarray(codes, np.int64)
    h = (codes - np.asarray(zero, np.int64)) << unit_shift(fmt)
    if fmt.kind is FormatKind.DENORM_INT:
        h = np.where(codes == fmt.c1, 1, h)
        h = np.where(codes == fmt.c2, -1, h)
    return h


def unit_value(step, fmt: QuantFormat):
    return np.asarray(step, np.float64) * (fmt.special_ratio if fmt.kind is FormatKind.DENORM_INT else 1.0)


def worst_case_accumulator(length: int, fmt: QuantFormat = QuantFormat.dint(4), x_bits: int = 8) -> int:
    """Largest |partial sum| reachable for ``length`` products."""
    return length * (fmt.levels << unit_shift(fmt)) * ((1 << x_bits) - 1)


def _check_partials(partials: np.ndarray, acc_bits: int) -> None:
    hi = (1 << (acc_bits - 1)) - 1
    lo = -(1 << (acc_bits - 1))
    if partials.size and (partials.max() > hi or partials.min() < lo):
        raise AccumulatorOverflow(f"partial sum leaves the {acc_bits}-bit accumulator range")


def mac_accumulate(w: MacOperandW, x: MacOperandX, acc_bits: int = ACC_BITS) -> int:
    """The raw integer accumulator value after summing every product."""
    if w.codes.shape != x.codes.shape or w.codes.ndim != 1:
        raise ValueError("operands must be 1-D vectors of equal length")
    n = w.codes.shape[0]
    if n > MAX_LENGTH:
        raise ValueError(f"vector length {n} exceeds {MAX_LENGTH}")
    h = weight_units(w.codes, w.zero, w.format)
    a = x.codes - x.zero
    partials = np.cumsum(h * a)
    _check_partials(partials, acc_bits)
    return int(partials[-1]) if n else 0


def mac_dot(w: MacOperandW, x: MacOperandX, acc_bits: int = ACC_BITS) -> float:
    """Dot product of a dequantized weight vector and activation vector via the integer path."""
    acc = mac_accumulate(w, x, acc_bits)
    unit = float(unit_value(w.step, w.format))
    out = acc * unit * x.step
    if w.offset or x.offset:
        h = weight_units(w.codes, w.zero, w.format)
        a = x.codes - x.zero
        n = w.codes.shape[0]
        out += w.offset * x.step * int(a.sum()) + x.offset * unit * int(h.sum()) + n * w.offset * x.offset
    return float(out)


def _row_params(q: QuantizedTensor, axis_kinds, n: int, what: str):
    if q.granularity.kind == "per_tensor":
        return (np.repeat(q.steps, n), np.repeat(q.zeros, n), np.repeat(q.offsets, n))
    if q.granularity.kind not in axis_kinds:
        raise ValueError(f"{what} params must be constant along the accumulation axis, "
                         f"got {q.granularity.name}")
    return q.steps, q.zeros, q.offsets


def mac_matmul(Wq: QuantizedTensor, Xq: QuantizedTensor, acc_bits: int = ACC_BITS) -> np.ndarray:
    """``M x T`` output where each element is ``mac_dot`` of a weight row and activation column."""
    M, C = Wq.shape
    if Xq.shape[0] != C:
        raise ValueError(f"inner dimensions differ: {C} vs {Xq.shape[0]}")
    if C > MAX_LENGTH:
        raise ValueError(f"vector length {C} exceeds {MAX_LENGTH}")
    if Xq.format.kind is not FormatKind.UNIFORM_INT:
        raise ValueError("activations must use a uniform INT format")
    T = Xq.shape[1]
    s_w, z_w, o_w = _row_params(Wq, ("per_output_channel", "per_channel"), M, "weight")
    s_x, z_x, o_x = _row_params(Xq, ("per_token",), T, "activation")

    h = weight_units(Wq.codes, z_w[:, None], Wq.format)
    a = Xq.codes - z_x[None, :]
    bound = C * int(np.abs(h).max(initial=0)) * int(np.abs(a).max(initial=0))
    if bound > (1 << (acc_bits - 1)) - 1:
        # sequential partial sums, one output row at a time
        for m in range(M):
            _check_partials(np.cumsum(h[m][:, None] * a, axis=0), acc_bits)
    acc = h @ a
    unit = unit_value(s_w, Wq.format)
    out = acc * unit[:, None] * s_x[None, :]
    if np.any(o_w) or np.any(o_x):
        out += o_w[:, None] * s_x[None, :] * a.sum(axis=0)[None, :]
        out += o_x[None, :] * unit[:, None] * h.sum(axis=1)[:, None]
        out += C * o_w[:, None] * o_x[None, :]
    return out


def operands_from(Wq: QuantizedTensor, row: int, Xq: QuantizedTensor, col: int):
    """Slice one weight row and one activation column out of quantized tensors."""
    s_w, z_w, o_w = _row_params(Wq, ("per_output_channel", "per_channel"), Wq.shape[0], "weight")
    s_x, z_x, o_x = _row_params(Xq, ("per_token",), Xq.shape[1], "activation")
    w = MacOperandW(Wq.codes[row], float(s_w[row]), int(z_w[row]), Wq.format, float(o_w[row]))
    x = MacOperandX(Xq.codes[:, col], float(s_x[col]), int(z_x[col]), Xq.format.bits, float(o_x[col]))
    return w, x
