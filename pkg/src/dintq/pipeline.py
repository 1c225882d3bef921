"""Per-layer recipe: scale search, weight calibration (nearest or OPTQ), Value
quantization and error analysis, plus the on-disk result bundle."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import report
from .analysis import ErrorEntry, decompose_error, range_report, slac_capsule
from .formats import QuantFormat
from .optq import DEFAULT_DAMP, accumulate_hessian, damp, optq_quantize
from .quantizer import Granularity, QuantizedTensor, dequantize, fake_quant, quantize
from .scaler import (
    DEFAULT_CLIP_RATIOS,
    DEFAULT_GRID_SIZE,
    ScaleResult,
    aqas_search,
    awq_scale,
    clip_search,
    default_grid,
    scaled_output_mse,
    sq_scale,
)
from .tensorio import LayerCapsule, save_capsules, write_tensor

SCALINGS = ("none", "sq", "awq", "aqas")


@dataclass(frozen=True)
class RecipeConfig:
    wfmt: QuantFormat = QuantFormat.dint(4)
    afmt: Optional[QuantFormat] = QuantFormat.int(8)
    vfmt: Optional[QuantFormat] = QuantFormat.dint(4)
    scaling: str = "aqas"
    optq: bool = True
    w_gran: Granularity = Granularity.per_output_channel()
    a_gran: Granularity = Granularity.per_token()
    v_gran: Granularity = Granularity.per_channel()
    slac_len: Optional[int] = None
    grid_size: int = DEFAULT_GRID_SIZE
    reducer: str = "max"
    sq_alpha: float = 0.5
    clip: bool = True
    clip_ratios: tuple = DEFAULT_CLIP_RATIOS
    lambda_rel: float = DEFAULT_DAMP

    def __post_init__(self):
        if self.scaling not in SCALINGS:
            raise ValueError(f"scaling must be one of {SCALINGS}")
        if self.slac_len is not None and self.slac_len <= 0:
            raise ValueError("SLAC target length must be positive")
        if self.w_gran.kind == "per_token":
            raise ValueError("weights cannot be quantized per token")
        if self.scaling == "sq" and self.afmt is None:
            raise ValueError("SQ scaling needs an activation format")

    def to_dict(self) -> dict:
        return {
            "wfmt": self.wfmt.name,
            "afmt": None if self.afmt is None else self.afmt.name,
            "vfmt": None if self.vfmt is None else self.vfmt.name,
            "scaling": self.scaling,
            "optq": self.optq,
            "w_gran": self.w_gran.name,
            "a_gran": self.a_gran.name,
            "v_gran": self.v_gran.name,
            "slac_len": self.slac_len,
            "grid_size": self.grid_size,
            "reducer": self.reducer,
            "sq_alpha": self.sq_alpha,
            "clip": self.clip,
            "clip_ratios": list(self.clip_ratios),
            "lambda_rel": self.lambda_rel,
        }


@dataclass
class LayerResult:
    name: str
    scale: ScaleResult
    weight_q: QuantizedTensor
    weight_deq: np.ndarray  # dequantized weights in the scaled domain
    scaled: LayerCapsule  # original capsule after apply_scaling
    value_q: Optional[QuantizedTensor]
    error: ErrorEntry
    output_mse: dict = field(default_factory=dict)  # sequence length -> mse


@dataclass
class RecipeResult:
    config: RecipeConfig
    layers: list
    ranges: dict


def _scale(cap: LayerCapsule, cfg: RecipeConfig) -> ScaleResult:
    C = cap.weight.shape[1]
    if cfg.scaling == "none":
        ones = np.ones(C)
        mse = scaled_output_mse(cap.weight, cap.tokens(), ones, cfg.wfmt, cfg.afmt, cfg.w_gran, cfg.a_gran)
        return ScaleResult(ones, None, mse, "none")
    if cfg.scaling == "sq":
        return sq_scale(cap, cfg.sq_alpha, cfg.afmt, cfg.a_gran)
    grid = default_grid(cfg.grid_size)
    if cfg.scaling == "awq":
        return awq_scale(cap, cfg.wfmt, grid, gran_w=cfg.w_gran)
    if cfg.afmt is None:
        # weight-only: the AQAS objective reduces to the weight side
        return awq_scale(cap, cfg.wfmt, grid, reducer=cfg.reducer, gran_w=cfg.w_gran)
    return aqas_search(cap, cfg.wfmt, cfg.afmt, grid, cfg.reducer, cfg.w_gran, cfg.a_gran)


def run_layer(capsule: LayerCapsule, cfg: RecipeConfig) -> LayerResult:
    cal = slac_capsule(capsule, cfg.slac_len) if cfg.slac_len else capsule
    result = _scale(cal, cfg)
    s = result.scales
    W = np.asarray(capsule.weight, np.float64) * s[None, :]
    X_cal = np.asarray(cal.tokens(), np.float64) / s[:, None]

    clip = None
    if cfg.clip and cfg.scaling in ("awq", "aqas") and cfg.w_gran.kind != "per_tensor":
        clip = clip_search(W, X_cal, cfg.wfmt, cfg.clip_ratios, cfg.w_gran)
        result.clip_ratios = clip

    if cfg.optq:
        h = damp(accumulate_hessian(X_cal), cfg.lambda_rel)
        wq = optq_quantize(W, h, cfg.wfmt, cfg.w_gran, clip)
    else:
        wq = quantize(W, cfg.wfmt, cfg.w_gran, clip)
    w_deq = dequantize(wq)

    scaled = capsule.replace(
        weight=W,
        activations={L: np.asarray(x, np.float64) / s[:, None] for L, x in capsule.activations.items()},
    )
    ref_w = np.asarray(capsule.weight, np.float64)
    output_mse = {}
    for L, x in capsule.activations.items():
        xs = scaled.activations[L]
        xq = xs if cfg.afmt is None else fake_quant(xs, cfg.afmt, cfg.a_gran)
        output_mse[L] = float(np.mean((w_deq @ xq - ref_w @ np.asarray(x, np.float64)) ** 2))

    value_q = None
    if capsule.value is not None and cfg.vfmt is not None:
        value_q = quantize(capsule.value, cfg.vfmt, cfg.v_gran)

    return LayerResult(capsule.name, result, wq, w_deq, scaled, value_q,
                       decompose_error(W, w_deq, X_cal), output_mse)


def _run_layer_args(args):
    return run_layer(*args)


def run_recipe(capsules: Sequence[LayerCapsule], config: RecipeConfig, jobs: int = 1) -> RecipeResult:
    """Apply the recipe to every layer; output order and values do not depend on ``jobs``."""
    capsules = list(capsules)
    if not capsules:
        raise ValueError("no layers to quantize")
    if jobs > 1 and len(capsules) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(capsules))) as ex:
            layers = list(ex.map(_run_layer_args, [(c, config) for c in capsules]))
    else:
        layers = [run_layer(c, config) for c in capsules]
    return RecipeResult(config, layers, range_report(capsules))


def error_report_dict(layers) -> dict:
    return {lr.name: lr.error.to_dict() for lr in layers}


def range_report_dict(ranges) -> dict:
    return {name: entry.to_dict() for name, entry in ranges.items()}


def summary_dict(res: RecipeResult) -> dict:
    return {
        "config": res.config.to_dict(),
        "layers": [
            {
                "name": lr.name,
                "scaling": lr.scale.method,
                "alpha": lr.scale.alpha,
                "output_mse": {str(L): m for L, m in lr.output_mse.items()},
                "weight_groups": int(lr.weight_q.steps.shape[0]),
                "value_groups": None if lr.value_q is None else int(lr.value_q.steps.shape[0]),
            }
            for lr in res.layers
        ],
    }


def write_bundle(res: RecipeResult, out_dir) -> Path:
    """Write the result bundle::

        out/manifest.json             scaled capsules with dequantized weights
        out/tensors/*.qten            weights, codes, scales, Value
        out/reports/*.json, *.tsv     error, range, scale reports and summary
    """
    out = Path(out_dir)
    tensors = out / "tensors"
    reports = out / "reports"
    tensors.mkdir(parents=True, exist_ok=True)
    reports.mkdir(parents=True, exist_ok=True)

    quantized = []
    for lr in res.layers:
        write_tensor(lr.weight_q.codes.astype(np.float32), tensors / f"{lr.name}.weight_codes.qten")
        write_tensor(lr.scale.scales, tensors / f"{lr.name}.scales.qten")
        value = None
        if lr.value_q is not None:
            value = dequantize(lr.value_q)
        quantized.append(lr.scaled.replace(weight=lr.weight_deq, value=value))
    save_capsules(quantized, out, "manifest.json", tensor_dir="tensors")

    report.write_json(error_report_dict(res.layers), reports / "error_report.json")
    report.write_json(range_report_dict(res.ranges), reports / "range_report.json")
    report.write_json({lr.name: lr.scale.to_dict() for lr in res.layers}, reports / "scales.json")
    report.write_json(summary_dict(res), reports / "summary.json")
    rows = []
    for lr in res.layers:
        for L, m in lr.output_mse.items():
            rows.append((lr.name, L, m, lr.error.total, lr.error.underflow_term))
    (reports / "summary.tsv").write_text(
        report.tsv(("layer", "seq_len", "output_mse", "weight_error", "underflow_term"), rows),
        encoding="utf-8")
    return out
