"""Error decomposition, activation/weight range diagnostics and sequence-length-aware calibration."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .formats import QuantFormat
from .optq import DEFAULT_DAMP, accumulate_hessian, damp, optq_quantize
from .quantizer import Granularity, dequantize, fake_quant
from .scaler import aqas_search
from .tensorio import LayerCapsule


@dataclass(frozen=True)
class ErrorEntry:
    """Output-error terms, each a mean over the ``M x T`` outputs.

    ``total == underflow_term + rounding_term + cross_term`` up to rounding.
    """

    underflow_term: float
    rounding_term: float
    cross_term: float
    total: float
    underflow_fraction: float

    def to_dict(self) -> dict:
        return asdict(self)


def decompose_error(W, Wq, X) -> ErrorEntry:
    """Split ``(Wq - W) X`` into the part from weights that rounded to zero and the rest.

    A weight underflows when its dequantized value is exactly 0 while the
    original is nonzero.
    """
    W = np.asarray(W, np.float64)
    Wq = np.asarray(Wq, np.float64)
    X = np.asarray(X, np.float64)
    if W.shape != Wq.shape or W.ndim != 2 or X.ndim != 2 or X.shape[0] != W.shape[1]:
        raise ValueError(f"shape mismatch: W {W.shape}, Wq {Wq.shape}, X {X.shape}")
    delta = Wq - W
    under = (Wq == 0.0) & (W != 0.0)
    d_u = np.where(under, delta, 0.0)
    d_r = delta - d_u
    yu = d_u @ X
    yr = d_r @ X
    yt = delta @ X
    return ErrorEntry(
        underflow_term=float(np.mean(yu * yu)),
        rounding_term=float(np.mean(yr * yr)),
        cross_term=float(np.mean(2.0 * yu * yr)),
        total=float(np.mean(yt * yt)),
        underflow_fraction=float(np.count_nonzero(under) / W.size),
    )


@dataclass(frozen=True)
class RangeEntry:
    act_min: float
    act_max: float
    weight_min: float
    weight_max: float
    channel_max: dict  # sequence length -> per-channel max |X|

    def to_dict(self) -> dict:
        return {
            "act_min": self.act_min,
            "act_max": self.act_max,
            "weight_min": self.weight_min,
            "weight_max": self.weight_max,
            "channel_max": {str(k): list(v) for k, v in self.channel_max.items()},
        }


def range_report(capsules: Sequence[LayerCapsule]) -> dict[str, RangeEntry]:
    """Min-Max of activations (all stored lengths) and weights, plus per-channel
    activation maxima for each sequence length."""
    if not capsules:
        raise ValueError("need at least one capsule")
    out = {}
    for cap in capsules:
        x = cap.tokens()
        out[cap.name] = RangeEntry(
            act_min=float(x.min()),
            act_max=float(x.max()),
            weight_min=float(cap.weight.min()),
            weight_max=float(cap.weight.max()),
            channel_max={L: np.abs(a).max(axis=1).astype(np.float64).tolist()
                         for L, a in cap.activations.items()},
        )
    return out


def slac_build(corpus, target_len: int) -> list[np.ndarray]:
    """Cut sequences into non-overlapping windows of exactly ``target_len`` along the last axis.

    ``corpus`` is a list of arrays (1-D token sequences or ``(C, T)`` activation
    batches) or a mapping keyed by sequence length, visited in ascending key
    order. Windows start at each sequence's beginning; tails shorter than
    ``target_len`` and shorter sequences are dropped.
    """
    if target_len <= 0:
        raise ValueError("target length must be positive")
    if isinstance(corpus, Mapping):
        seqs = [corpus[k] for k in sorted(corpus)]
    else:
        seqs = list(corpus)
    if not seqs:
        raise ValueError("empty corpus")
    windows = []
    for seq in seqs:
        seq = np.asarray(seq)
        n = seq.shape[-1] // target_len
        for i in range(n):
            windows.append(seq[..., i * target_len:(i + 1) * target_len])
    if not windows:
        raise ValueError(f"insufficient length: no sequence reaches {target_len} tokens")
    return windows


def slac_capsule(capsule: LayerCapsule, target_len: int) -> LayerCapsule:
    """The capsule with its calibration activations replaced by ``target_len``
    windows, concatenated along the token axis.

    A batch stored under length ``L`` holds back-to-back sequences of ``L``
    tokens; windows never cross those boundaries.
    """
    seqs = []
    for L in sorted(capsule.activations):
        x = capsule.activations[L]
        seqs.extend(x[:, i:i + L] for i in range(0, x.shape[1], L))
    windows = slac_build(seqs, target_len)
    return capsule.replace(activations={target_len: np.concatenate(windows, axis=1)})


@dataclass(frozen=True)
class SlacTable:
    eval_len: int
    rows: tuple  # (calibration length, output mse)
    std: float

    @property
    def best_length(self) -> int:
        return min(self.rows, key=lambda r: r[1])[0]

    @property
    def spread(self) -> float:
        m = [r[1] for r in self.rows]
        return (max(m) - min(m)) / min(m) if min(m) > 0 else 0.0

    def to_dict(self) -> dict:
        return {"eval_len": self.eval_len, "std": self.std,
                "rows": [{"calib_len": L, "mse": m} for L, m in self.rows]}


def slac_sensitivity(
    capsule: LayerCapsule,
    fmt_w: QuantFormat,
    fmt_x: Optional[QuantFormat],
    lengths: Sequence[int],
    eval_len: Optional[int] = None,
    optq: bool = True,
    scaling: str = "none",
    gran_w: Granularity = Granularity.per_output_channel(),
    gran_x: Granularity = Granularity.per_token(),
    lambda_rel: float = DEFAULT_DAMP,
) -> SlacTable:
    """Output mse at ``eval_len`` for weights calibrated on each length in ``lengths``."""
    lengths = list(lengths)
    if not lengths:
        raise ValueError("need at least one calibration length")
    eval_len = min(lengths) if eval_len is None else eval_len
    for L in lengths + [eval_len]:
        if L not in capsule.activations:
            raise KeyError(f"{capsule.name}: missing activations for length {L}")
    W = np.asarray(capsule.weight, np.float64)
    X_eval = np.asarray(capsule.activations[eval_len], np.float64)
    ref = W @ X_eval
    rows = []
    for L in lengths:
        s = np.ones(W.shape[1])
        if scaling == "aqas":
            s = aqas_search(capsule, fmt_w, fmt_x or QuantFormat.int(8), length=L,
                            gran_w=gran_w, gran_x=gran_x).scales
        elif scaling != "none":
            raise ValueError(f"unsupported scaling {scaling!r}")
        Ws = W * s[None, :]
        if optq:
            h = damp(accumulate_hessian(capsule.activations[L] / s[:, None]), lambda_rel)
            Wq = dequantize(optq_quantize(Ws, h, fmt_w, gran_w))
        else:
            Wq = fake_quant(Ws, fmt_w, gran_w)
        Xs = X_eval / s[:, None]
        Xq = Xs if fmt_x is None else fake_quant(Xs, fmt_x, gran_x)
        rows.append((L, float(np.mean((Wq @ Xq - ref) ** 2))))
    std = float(np.std([m for _, m in rows]))
    return SlacTable(eval_len, tuple(rows), std)
