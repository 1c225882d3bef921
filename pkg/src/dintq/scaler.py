"""Per-input-channel scale search.

A scale vector ``s`` migrates magnitude between the operands of ``W @ X``:
``W' = W * s`` (columns) and ``X' = X / s`` (rows), so ``W' @ X' == W @ X``.
AQAS picks ``s`` by minimizing the output error with *both* operands
quantized; the SmoothQuant-style and AWQ-style baselines each quantize only
one side.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .formats import QuantFormat
from .quantizer import Granularity, fake_quant
from .tensorio import LayerCapsule

STAT_FLOOR = 1e-8
DEFAULT_GRID_SIZE = 21
DEFAULT_CLIP_RATIOS = (1.0, 0.95, 0.9, 0.85, 0.8, 0.75, 0.7)
REDUCERS = ("max", "mean")

OutputTransform = Callable[[np.ndarray], np.ndarray]


@dataclass
class ScaleResult:
    scales: np.ndarray
    alpha: Optional[float]
    mse: float
    method: str
    clip_ratios: Optional[np.ndarray] = None
    history: list = field(default_factory=list)

    def __post_init__(self):
        s = np.asarray(self.scales, np.float64)
        if not (np.all(np.isfinite(s)) and np.all(s > 0)):
            raise ValueError("scales must be positive and finite")
        if not self.mse >= 0:
            raise ValueError("mse must be non-negative")
        self.scales = s

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "alpha": self.alpha,
            "mse": self.mse,
            "scales": self.scales.tolist(),
            "clip_ratios": None if self.clip_ratios is None else np.asarray(self.clip_ratios).tolist(),
            "grid": [{"alpha": a, "mse": m} for a, m in self.history],
        }


def default_grid(n: int = DEFAULT_GRID_SIZE) -> list[float]:
    if n < 1:
        raise ValueError("grid needs at least one point")
    return [0.5] if n == 1 else np.linspace(0.0, 1.0, n).tolist()


def _reduce(a: np.ndarray, axis: int, reducer: str) -> np.ndarray:
    if reducer == "max":
        return np.max(np.abs(a), axis=axis)
    if reducer == "mean":
        return np.mean(np.abs(a), axis=axis)
    raise ValueError(f"unknown reducer {reducer!r}; expected one of {REDUCERS}")


def channel_stats(capsule: LayerCapsule, reducer: str = "max", length: Optional[int] = None):
    """Representative magnitude per input channel: ``(a, w)`` for activations and weights."""
    x = np.asarray(capsule.tokens(length), np.float64)
    w = np.asarray(capsule.weight, np.float64)
    return _reduce(x, 1, reducer), _reduce(w, 0, reducer)


def candidate_scales(a: np.ndarray, w: np.ndarray, alpha: float) -> np.ndarray:
    a = np.maximum(a, STAT_FLOOR)
    w = np.maximum(w, STAT_FLOOR)
    return a ** alpha / w ** (1.0 - alpha)


def scaled_output_mse(
    W,
    X,
    s=None,
    fmt_w: Optional[QuantFormat] = None,
    fmt_x: Optional[QuantFormat] = None,
    gran_w: Granularity = Granularity.per_output_channel(),
    gran_x: Granularity = Granularity.per_token(),
    transform: Optional[OutputTransform] = None,
    clip=None,
) -> float:
    """``mean((Q(W diag s) Q(diag(s)^-1 X) - W X)**2)``; a None format leaves that side unquantized."""
    W = np.asarray(W, np.float64)
    X = np.asarray(X, np.float64)
    if s is None:
        Ws, Xs = W, X
    else:
        s = np.asarray(s, np.float64)
        Ws, Xs = W * s[None, :], X / s[:, None]
    Wq = Ws if fmt_w is None else fake_quant(Ws, fmt_w, gran_w, clip)
    Xq = Xs if fmt_x is None else fake_quant(Xs, fmt_x, gran_x)
    y = Wq @ Xq
    ref = W @ X
    if transform is not None:
        y, ref = transform(y), transform(ref)
    return float(np.mean((y - ref) ** 2))


def _grid_search(capsule, a, w, grid, family, objective, method):
    if len(grid) == 0:
        raise ValueError("grid must be nonempty")
    history = []
    best = None
    for alpha in grid:
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"grid values must lie in [0, 1], got {alpha}")
        s = family(a, w, alpha)
        mse = objective(s)
        history.append((float(alpha), mse))
        if best is None or mse < best[2]:
            best = (s, float(alpha), mse)
    return ScaleResult(best[0], best[1], best[2], method, history=history)


def _check_tokens(capsule, length):
    x = capsule.tokens(length)
    if x.shape[1] == 0:
        raise ValueError(f"{capsule.name}: no tokens to calibrate on")
    return x


def aqas_search(
    capsule: LayerCapsule,
    fmt_w: QuantFormat,
    fmt_x: QuantFormat,
    grid: Optional[Sequence[float]] = None,
    reducer: str = "max",
    gran_w: Granularity = Granularity.per_output_channel(),
    gran_x: Granularity = Granularity.per_token(),
    length: Optional[int] = None,
    transform: Optional[OutputTransform] = None,
) -> ScaleResult:
    """Grid search over ``s = a**alpha / w**(1 - alpha)`` minimizing the output
    error with weights and activations both fake-quantized."""
    grid = default_grid() if grid is None else list(grid)
    X = _check_tokens(capsule, length)
    W = capsule.weight
    a, w = channel_stats(capsule, reducer, length)

    def objective(s):
        return scaled_output_mse(W, X, s, fmt_w, fmt_x, gran_w, gran_x, transform)

    return _grid_search(capsule, a, w, grid, candidate_scales, objective, "aqas")


def sq_scale(
    capsule: LayerCapsule,
    alpha: float = 0.5,
    fmt_x: Optional[QuantFormat] = None,
    gran_x: Granularity = Granularity.per_token(),
    length: Optional[int] = None,
    transform: Optional[OutputTransform] = None,
) -> ScaleResult:
    """SmoothQuant migration ``s = max|X|**alpha / max|W|**(1-alpha)``, scored with
    only the activations quantized."""
    fmt_x = QuantFormat.int(8) if fmt_x is None else fmt_x
    X = _check_tokens(capsule, length)
    a, w = channel_stats(capsule, "max", length)

    def objective(s):
        return scaled_output_mse(capsule.weight, X, s, None, fmt_x, gran_x=gran_x, transform=transform)

    return _grid_search(capsule, a, w, [alpha], candidate_scales, objective, "sq")


def _awq_family(a, w, alpha):
    s = np.maximum(a, STAT_FLOOR) ** alpha
    return s / np.sqrt(s.max() * s.min())


def awq_scale(
    capsule: LayerCapsule,
    fmt_w: Optional[QuantFormat] = None,
    grid: Optional[Sequence[float]] = None,
    reducer: str = "mean",
    gran_w: Granularity = Granularity.per_output_channel(),
    length: Optional[int] = None,
    transform: Optional[OutputTransform] = None,
) -> ScaleResult:
    """AWQ-style search over ``s = a**alpha`` (normalized by ``sqrt(max*min)``),
    scored with only the weights quantized."""
    fmt_w = QuantFormat.int(4) if fmt_w is None else fmt_w
    grid = default_grid() if grid is None else list(grid)
    X = _check_tokens(capsule, length)
    a, w = channel_stats(capsule, reducer, length)

    def objective(s):
        return scaled_output_mse(capsule.weight, X, s, fmt_w, None, gran_w=gran_w, transform=transform)

    return _grid_search(capsule, a, w, grid, _awq_family, objective, "awq")


def group_output_errors(W, Wq, X, gran: Granularity) -> np.ndarray:
    """``||(Wq - W) X||**2`` restricted to each weight group (row or row chunk)."""
    D = np.asarray(Wq, np.float64) - np.asarray(W, np.float64)
    X = np.asarray(X, np.float64)
    if gran.kind == "per_tensor":
        return np.array([np.sum((D @ X) ** 2)])
    if gran.kind in ("per_output_channel", "per_channel"):
        return np.sum((D @ X) ** 2, axis=1)
    if gran.kind == "group":
        g = gran.group_size
        cols = D.shape[1]
        parts = [np.sum((D[:, j:j + g] @ X[j:j + g]) ** 2, axis=1) for j in range(0, cols, g)]
        return np.stack(parts, axis=1).ravel()
    raise ValueError(f"clip search does not support {gran.name} weight groups")


def clip_search(
    W_scaled,
    X_scaled,
    fmt_w: QuantFormat,
    ratios: Sequence[float] = DEFAULT_CLIP_RATIOS,
    gran: Granularity = Granularity.per_output_channel(),
) -> np.ndarray:
    """Per weight group, the clip ratio (first in ``ratios`` order on ties) that
    minimizes that group's output error."""
    ratios = list(ratios)
    if not ratios:
        raise ValueError("ratios must be nonempty")
    if any(not 0.0 < r <= 1.0 for r in ratios):
        raise ValueError("clip ratios must lie in (0, 1]")
    W = np.asarray(W_scaled, np.float64)
    errs = []
    for r in ratios:
        Wq = fake_quant(W, fmt_w, gran, clip=r)
        errs.append(group_output_errors(W, Wq, X_scaled, gran))
    errs = np.stack(errs)
    return np.asarray(ratios, np.float64)[np.argmin(errs, axis=0)]


def apply_scaling(capsule: LayerCapsule, s) -> LayerCapsule:
    """Return the capsule with ``W * s`` and every activation ``X / s`` (float64)."""
    s = np.asarray(s, np.float64)
    C = capsule.weight.shape[1]
    if s.shape != (C,):
        raise ValueError(f"scale vector must have length {C}")
    if not (np.all(np.isfinite(s)) and np.all(s > 0)):
        raise ValueError("scales must be strictly positive and finite")
    W = np.asarray(capsule.weight, np.float64) * s[None, :]
    acts = {L: np.asarray(x, np.float64) / s[:, None] for L, x in capsule.activations.items()}
    return capsule.replace(weight=W, activations=acts)
