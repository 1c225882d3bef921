"""Min-Max asymmetric calibration, grouping and fake quantization of tensors.

Layout conventions: weights are ``(M, C)``, activations ``(C, T)`` and Value
tensors ``(D, T)``. So a per-output-channel group is a weight row, a per-token
group is an activation column, and a per-channel group is a row of an
activation or Value tensor (constant along the token axis, which is the axis
partial sums accumulate over).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .formats import FormatKind, QuantFormat, QuantParams, decode, encode, fp4_max

ROW_KINDS = ("per_output_channel", "per_channel")
KINDS = ("per_tensor", "per_output_channel", "per_channel", "per_token", "group")

# steps are rounded up to this many mantissa bits so that (k - z) * s is exact
# for every |k - z| < 2**9
_STEP_MANTISSA_BITS = 44


@dataclass(frozen=True)
class Granularity:
    kind: str = "per_tensor"
    group_size: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown granularity {self.kind!r}")
        if self.kind == "group" and self.group_size <= 0:
            raise ValueError("group size must be positive")

    @classmethod
    def per_tensor(cls):
        return cls("per_tensor")

    @classmethod
    def per_output_channel(cls):
        return cls("per_output_channel")

    @classmethod
    def per_channel(cls):
        return cls("per_channel")

    @classmethod
    def per_token(cls):
        return cls("per_token")

    @classmethod
    def group(cls, g: int):
        return cls("group", g)

    @property
    def name(self) -> str:
        return f"group{self.group_size}" if self.kind == "group" else self.kind

    def group_ids(self, shape: tuple[int, ...]) -> tuple[np.ndarray, int]:
        """Group index of every element (same shape as the tensor) and the group count.

        Groups are numbered in row-major order.
        """
        if self.kind == "per_tensor":
            return np.zeros(shape, dtype=np.int64), 1
        if len(shape) != 2:
            raise ValueError(f"{self.kind} granularity needs a 2-D tensor, got shape {shape}")
        rows, cols = shape
        if self.kind in ROW_KINDS:
            return np.broadcast_to(np.arange(rows)[:, None], shape).copy(), rows
        if self.kind == "per_token":
            return np.broadcast_to(np.arange(cols)[None, :], shape).copy(), cols
        n_chunks = -(-cols // self.group_size)
        ids = np.arange(rows)[:, None] * n_chunks + np.arange(cols)[None, :] // self.group_size
        return ids, rows * n_chunks


def parse_granularity(text: str) -> Granularity:
    t = text.strip().lower().replace("-", "_")
    if t.startswith("group"):
        return Granularity.group(int(t[5:].lstrip("_=") or 128))
    if t.startswith("g") and t[1:].isdigit():
        return Granularity.group(int(t[1:]))
    return Granularity(t)


@dataclass(frozen=True)
class QuantizedTensor:
    codes: np.ndarray
    steps: np.ndarray
    zeros: np.ndarray
    offsets: np.ndarray
    format: QuantFormat
    granularity: Granularity

    @property
    def shape(self) -> tuple[int, ...]:
        return self.codes.shape

    @property
    def params(self) -> list[QuantParams]:
        return [QuantParams(float(s), int(z), self.format, float(o))
                for s, z, o in zip(self.steps, self.zeros, self.offsets)]

    def element_params(self):
        ids, _ = self.granularity.group_ids(self.shape)
        return self.steps[ids], self.zeros[ids], self.offsets[ids]


def _snap_step(s: np.ndarray) -> np.ndarray:
    m, e = np.frexp(s)
    scale = float(1 << _STEP_MANTISSA_BITS)
    return np.ldexp(np.ceil(m * scale) / scale, e)


def _group_extrema(t: np.ndarray, ids: np.ndarray, n: int):
    flat_ids = ids.ravel()
    vals = np.asarray(t, np.float64).ravel()
    lo = np.full(n, np.inf)
    hi = np.full(n, -np.inf)
    np.minimum.at(lo, flat_ids, vals)
    np.maximum.at(hi, flat_ids, vals)
    if np.any(~np.isfinite(lo)):
        raise ValueError("empty quantization group")
    return lo, hi


def calibrate_arrays(t, fmt: QuantFormat, gran: Granularity, clip=None):
    """Per-group ``(steps, zeros, offsets)`` arrays from Min-Max calibration.

    The range of each group is widened to include zero, optionally shrunk by a
    clip ratio in ``(0, 1]`` (scalar or one per group), and divided into the
    format's uniform steps. Constant groups get ``s=1, z=0`` with the constant
    as offset. FP4 groups are symmetric: ``s = absmax / max_codebook_value``.
    """
    t = np.asarray(t)
    if t.size == 0:
        raise ValueError("empty quantization group")
    if not np.all(np.isfinite(t)):
        raise ValueError("non-finite input")
    ids, n = gran.group_ids(t.shape)
    lo, hi = _group_extrema(t, ids, n)
    constant = lo == hi
    ratio = np.ones(n) if clip is None else np.broadcast_to(np.asarray(clip, np.float64), (n,))
    if np.any((ratio <= 0) | (ratio > 1)):
        raise ValueError("clip ratios must lie in (0, 1]")
    lo_c = np.minimum(lo, 0.0) * ratio
    hi_c = np.maximum(hi, 0.0) * ratio

    if fmt.kind is FormatKind.FLOAT4:
        span = np.maximum(-lo_c, hi_c) / fp4_max(fmt)
        zeros = np.zeros(n, dtype=np.int64)
    else:
        span = (hi_c - lo_c) / fmt.levels
    raw = np.where(constant | (span <= 0), 1.0, span)
    steps = _snap_step(raw)
    if fmt.kind is not FormatKind.FLOAT4:
        zeros = np.clip(np.rint(-lo_c / raw), 0, fmt.levels).astype(np.int64)
    zeros = np.where(constant, 0, zeros)
    offsets = np.where(constant, lo, 0.0)
    return steps, zeros, offsets


def calibrate_params(t, fmt: QuantFormat, gran: Granularity, clip=None) -> list[QuantParams]:
    steps, zeros, offsets = calibrate_arrays(t, fmt, gran, clip)
    return [QuantParams(float(s), int(z), fmt, float(o)) for s, z, o in zip(steps, zeros, offsets)]


def quantize_with(t, fmt: QuantFormat, gran: Granularity, steps, zeros, offsets) -> QuantizedTensor:
    """Encode ``t`` with fixed per-group parameters."""
    t = np.asarray(t)
    ids, n = gran.group_ids(t.shape)
    steps = np.asarray(steps, np.float64)
    zeros = np.asarray(zeros, np.int64)
    offsets = np.asarray(offsets, np.float64)
    if steps.shape != (n,) or zeros.shape != (n,) or offsets.shape != (n,):
        raise ValueError(f"expected {n} parameter groups")
    codes = encode(t, steps[ids], zeros[ids], fmt, offsets[ids])
    return QuantizedTensor(codes, steps, zeros, offsets, fmt, gran)


def quantize(t, fmt: QuantFormat, gran: Granularity, clip=None) -> QuantizedTensor:
    return quantize_with(t, fmt, gran, *calibrate_arrays(t, fmt, gran, clip))


def dequantize(q: QuantizedTensor) -> np.ndarray:
    s, z, o = q.element_params()
    return decode(q.codes, s, z, q.format, o)


def fake_quant(t, fmt: QuantFormat, gran: Granularity, clip=None) -> np.ndarray:
    """``decode(encode(x))`` with group-local Min-Max params; float64 output, same shape."""
    return dequantize(quantize(t, fmt, gran, clip))


def group_count(shape: Sequence[int], gran: Granularity) -> int:
    return gran.group_ids(tuple(shape))[1]


def maybe_fake_quant(t, fmt: Optional[QuantFormat], gran: Granularity) -> np.ndarray:
    """Fake-quantize, or pass through in float64 when ``fmt`` is None."""
    if fmt is None:
        return np.asarray(t, np.float64)
    return fake_quant(t, fmt, gran)
