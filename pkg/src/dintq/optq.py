"""Hessian-guided column-sequential weight quantization (OPTQ).

Columns are quantized in index order. After column ``q`` is rounded, the
remaining columns of every row absorb the error through

    delta_F = -(w_q - quant(w_q)) / [H_F^-1]_qq * (H_F^-1)[:, q]

where ``F`` is the set of not-yet-quantized columns and ``H = 2 X X^T``. The
rows of the upper Cholesky factor of ``H^-1`` carry ``(H_F^-1)[q, F]`` up to a
factor ``sqrt([H_F^-1]_qq)``, so a single factorization serves every step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .formats import QuantFormat, decode, encode
from .quantizer import Granularity, QuantizedTensor, calibrate_arrays

DEFAULT_DAMP = 0.01


class HessianError(ArithmeticError):
    """The (damped) Hessian is not positive definite."""


@dataclass(frozen=True)
class Hessian:
    H: np.ndarray
    damping: float = 0.0
    token_count: int = 0

    @property
    def size(self) -> int:
        return self.H.shape[0]


def accumulate_hessian(*batches) -> Hessian:
    """``H = 2 * sum_b X_b X_b^T`` over activation batches of shape ``(C, T_b)``."""
    if not batches:
        raise ValueError("need at least one activation batch")
    C = np.asarray(batches[0]).shape[0]
    H = np.zeros((C, C))
    tokens = 0
    for x in batches:
        x = np.asarray(x, np.float64)
        if x.ndim != 2 or x.shape[0] != C:
            raise ValueError(f"C mismatch: expected {C} channels, got shape {x.shape}")
        H += 2.0 * (x @ x.T)
        tokens += x.shape[1]
    return Hessian(H, 0.0, tokens)


def damp(h: Hessian, lambda_rel: float = DEFAULT_DAMP) -> Hessian:
    """Add ``lambda_rel * mean(diag(H))`` to the diagonal."""
    if lambda_rel < 0:
        raise ValueError("damping must be non-negative")
    H = np.array(h.H, np.float64)
    mean_diag = float(np.mean(np.diag(H)))
    if mean_diag == 0.0:
        if lambda_rel == 0.0:
            raise HessianError("all-zero Hessian cannot be damped with lambda_rel = 0")
        # nothing to be relative to
        mean_diag = 1.0
    H[np.diag_indices_from(H)] += lambda_rel * mean_diag
    return Hessian(H, h.damping + lambda_rel * mean_diag, h.token_count)


def inverse_cholesky(h: Hessian) -> np.ndarray:
    """Upper Cholesky factor ``U`` of ``H^-1`` (``H^-1 = U^T U``)."""
    H = np.asarray(h.H, np.float64)
    try:
        Hinv = scipy.linalg.cho_solve(scipy.linalg.cho_factor(H), np.eye(H.shape[0]))
        return scipy.linalg.cholesky(Hinv, lower=False)
    except np.linalg.LinAlgError as e:
        raise HessianError(f"Cholesky failed; damp the Hessian first ({e})") from e


def weight_update_ratio(h: Hessian, q: int) -> np.ndarray:
    """``(H_F^-1)[:, q] / [H_F^-1]_qq`` with ``F = {q, ..., C-1}``; zero on quantized columns."""
    C = h.size
    if not 0 <= q < C:
        raise IndexError(f"column {q} out of range for C={C}")
    U = inverse_cholesky(h)
    ratio = np.zeros(C)
    ratio[q:] = U[q, q:] / U[q, q]
    return ratio


def optq_sweep(W, h: Hessian, fmt: QuantFormat, gran: Granularity = Granularity.per_output_channel(),
               clip=None):
    """Run OPTQ; return the quantized tensor and the weights each column held
    at the moment it was rounded (after all earlier updates).

    Per-row and per-tensor parameters come from the original weights; for
    group-wise granularity each group is calibrated when its first column is
    reached, from the updated weights.
    """
    W = np.array(W, np.float64)
    if W.ndim != 2:
        raise ValueError("W must be 2-D")
    M, C = W.shape
    if h.size != C:
        raise ValueError(f"Hessian is {h.size}x{h.size} but W has {C} columns")
    if gran.kind == "per_token":
        raise ValueError("weights cannot use per-token groups")
    U = inverse_cholesky(h)
    ids, n = gran.group_ids(W.shape)

    if gran.kind == "group":
        g = gran.group_size
        n_chunks = -(-C // g)
        steps, zeros, offsets = np.ones(n), np.zeros(n, np.int64), np.zeros(n)
        clip_arr = None if clip is None else np.broadcast_to(np.asarray(clip, np.float64), (n,))
    else:
        steps, zeros, offsets = calibrate_arrays(W, fmt, gran, clip)

    codes = np.empty((M, C), dtype=np.int64)
    seen = np.empty((M, C))
    for q in range(C):
        if gran.kind == "group" and q % g == 0:
            chunk = q // g
            sel = np.arange(M) * n_chunks + chunk
            c_clip = None if clip_arr is None else clip_arr[sel]
            s, z, o = calibrate_arrays(W[:, q:q + g], fmt, Granularity.per_output_channel(), c_clip)
            steps[sel], zeros[sel], offsets[sel] = s, z, o
        col = W[:, q]
        gid = ids[:, q]
        seen[:, q] = col
        c = encode(col, steps[gid], zeros[gid], fmt, offsets[gid])
        qv = decode(c, steps[gid], zeros[gid], fmt, offsets[gid])
        codes[:, q] = c
        err = (col - qv) / U[q, q]
        W[:, q + 1:] -= np.outer(err, U[q, q + 1:])
    return QuantizedTensor(codes, steps, zeros, offsets, fmt, gran), seen


def optq_quantize(W, h: Hessian, fmt: QuantFormat, gran: Granularity = Granularity.per_output_channel(),
                  clip=None) -> QuantizedTensor:
    return optq_sweep(W, h, fmt, gran, clip)[0]
