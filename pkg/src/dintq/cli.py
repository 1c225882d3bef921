"""Command-line interface.

Exit codes: 0 ok, 1 usage, 2 data (bad files, manifests, shapes), 3 numeric
(Cholesky failure, accumulator overflow, MAC mismatch). Failures print one
JSON line on stderr: ``{"error": <kind>, "code": <n>, "message": <text>}``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import report
from .analysis import decompose_error, range_report, slac_capsule
from .formats import QuantFormat, parse_format
from .macsim import AccumulatorOverflow, mac_matmul
from .optq import HessianError, accumulate_hessian, damp, optq_quantize
from .pipeline import RecipeConfig, range_report_dict, run_recipe, write_bundle
from .quantizer import Granularity, dequantize, fake_quant, parse_granularity, quantize
from .scaler import REDUCERS, aqas_search, awq_scale, default_grid, sq_scale
from .tensorio import (
    DEFAULT_LENGTHS,
    ManifestError,
    SynthSpec,
    TensorFormatError,
    load_capsules,
    save_capsules,
    synth_capsule,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class NumericError(ArithmeticError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _fmt(text: str) -> QuantFormat:
    try:
        return parse_format(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e))


def _opt_fmt(text: str):
    return None if text.lower() in ("none", "fp", "fp16", "fp32") else _fmt(text)


def _gran(text: str) -> Granularity:
    try:
        return parse_granularity(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e))


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# -- subcommands ---------------------------------------------------------------

def cmd_quantize(args) -> int:
    cfg = RecipeConfig(
        wfmt=args.wfmt, afmt=args.afmt, vfmt=args.vfmt, scaling=args.scaling, optq=args.optq,
        w_gran=args.wgran, slac_len=args.slac_len, grid_size=args.grid, reducer=args.reducer,
        clip=args.clip, lambda_rel=args.damp,
    )
    res = run_recipe(load_capsules(args.manifest), cfg, jobs=args.jobs)
    out = write_bundle(res, args.out)
    sys.stdout.write((out / "reports" / "summary.tsv").read_text(encoding="utf-8"))
    return EXIT_OK


def cmd_scale_search(args) -> int:
    layers = {}
    for cap in load_capsules(args.manifest):
        if args.method == "aqas":
            r = aqas_search(cap, args.wfmt, args.afmt, default_grid(args.grid), args.reducer)
        elif args.method == "sq":
            r = sq_scale(cap, args.alpha, args.afmt)
        else:
            r = awq_scale(cap, args.wfmt, default_grid(args.grid), args.reducer)
        layers[cap.name] = r.to_dict()
    _emit(report.dumps({"layers": layers}), args.out)
    return EXIT_OK


def _quantized_weight(cap, wfmt, optq: bool, damp_rel: float):
    W = np.asarray(cap.weight, np.float64)
    gran = Granularity.per_output_channel()
    if optq:
        h = damp(accumulate_hessian(cap.tokens()), damp_rel)
        return dequantize(optq_quantize(W, h, wfmt, gran))
    return fake_quant(W, wfmt, gran)


def cmd_analyze(args) -> int:
    caps = load_capsules(args.manifest)
    errors = {}
    for cap in caps:
        wq = _quantized_weight(cap, args.wfmt, args.optq, args.damp)
        errors[cap.name] = decompose_error(cap.weight, wq, cap.tokens()).to_dict()
    doc = {"error_report": errors, "range_report": range_report_dict(range_report(caps))}
    _emit(report.dumps(doc), args.out)
    return EXIT_OK


def cmd_slac(args) -> int:
    caps = [slac_capsule(c, args.target_len) for c in load_capsules(args.manifest)]
    out = Path(args.out) if args.out else Path(args.manifest).parent / f"slac{args.target_len}"
    path = save_capsules(caps, out)
    sys.stdout.write(f"{path}\n")
    return EXIT_OK


def cmd_mac_check(args) -> int:
    rows = []
    ok = True
    for cap in load_capsules(args.manifest):
        wq = quantize(cap.weight, args.wfmt, Granularity.per_output_channel())
        w_deq = dequantize(wq)
        for L, x in cap.activations.items():
            xq = quantize(x, args.afmt, Granularity.per_token())
            got = mac_matmul(wq, xq, args.acc_bits)
            ref = w_deq @ dequantize(xq)
            scale = max(float(np.max(np.abs(ref))), np.finfo(float).tiny)
            err = float(np.max(np.abs(got - ref))) / scale
            passed = err <= args.rtol
            ok &= passed
            rows.append((cap.name, L, err, "ok" if passed else "FAIL"))
    sys.stdout.write(report.tsv(("layer", "seq_len", "max_rel_err", "status"), rows))
    if not ok:
        raise NumericError("MAC output differs from the dequantized reference")
    return EXIT_OK


def special_sweep(capsules, ratios, bits: int = 4, afmt=None, optq: bool = False, damp_rel: float = 0.01):
    """Mean output mse over layers for dINT weights at each special ratio, in ``ratios`` order."""
    rows = []
    for r in ratios:
        fmt = QuantFormat.dint(bits, r)
        errs = []
        for cap in capsules:
            X = np.asarray(cap.tokens(), np.float64)
            wq = _quantized_weight(cap, fmt, optq, damp_rel)
            xq = X if afmt is None else fake_quant(X, afmt, Granularity.per_token())
            errs.append(float(np.mean((wq @ xq - np.asarray(cap.weight, np.float64) @ X) ** 2)))
        rows.append((r, float(np.mean(errs))))
    return rows


def cmd_sweep_special(args) -> int:
    try:
        for r in args.ratios:
            QuantFormat.dint(args.bits, r)
    except ValueError as e:
        raise UsageError(str(e))
    rows = special_sweep(load_capsules(args.manifest), args.ratios, args.bits, args.afmt, args.optq, args.damp)
    best = min(range(len(rows)), key=lambda i: rows[i][1])
    table = [(report.fmt_num(r), m, int(i == best)) for i, (r, m) in enumerate(rows)]
    _emit(report.tsv(("ratio", "mse", "selected"), table), args.out)
    return EXIT_OK


def cmd_synth(args) -> int:
    caps = [
        synth_capsule(SynthSpec(
            args.M, args.C, profile=args.profile, seed=args.seed * 1000 + k, lengths=tuple(args.lengths),
            n_outliers=args.outliers, token_budget=args.token_budget, name=f"layer{k}",
        ))
        for k in range(args.layers)
    ]
    path = save_capsules(caps, args.out)
    sys.stdout.write(f"{path}\n")
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dintq", description="W4A8 post-training quantization toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def manifest(sp):
        sp.add_argument("--manifest", required=True, help="capsule manifest (JSON)")

    q = sub.add_parser("quantize", help="run the full per-layer recipe and write a result bundle")
    manifest(q)
    q.add_argument("--wfmt", type=_fmt, default=QuantFormat.dint(4))
    q.add_argument("--afmt", type=_opt_fmt, default=QuantFormat.int(8))
    q.add_argument("--vfmt", type=_opt_fmt, default=QuantFormat.dint(4))
    q.add_argument("--scaling", choices=("none", "sq", "awq", "aqas"), default="aqas")
    q.add_argument("--optq", action=argparse.BooleanOptionalAction, default=False)
    q.add_argument("--wgran", type=_gran, default=Granularity.per_output_channel())
    q.add_argument("--slac-len", type=int, default=None)
    q.add_argument("--grid", type=int, default=21)
    q.add_argument("--reducer", choices=REDUCERS, default="max")
    q.add_argument("--clip", action=argparse.BooleanOptionalAction, default=True)
    q.add_argument("--damp", type=float, default=0.01)
    q.add_argument("--jobs", type=int, default=1)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_quantize)

    s = sub.add_parser("scale-search", help="per-channel scale search, ScaleResult JSON")
    manifest(s)
    s.add_argument("--method", choices=("aqas", "sq", "awq"), default="aqas")
    s.add_argument("--grid", type=int, default=21)
    s.add_argument("--reducer", choices=REDUCERS, default="max")
    s.add_argument("--alpha", type=float, default=0.5, help="SQ migration strength")
    s.add_argument("--wfmt", type=_fmt, default=QuantFormat.dint(4))
    s.add_argument("--afmt", type=_fmt, default=QuantFormat.int(8))
    s.add_argument("--out")
    s.set_defaults(func=cmd_scale_search)

    a = sub.add_parser("analyze", help="error decomposition and range report JSON")
    manifest(a)
    a.add_argument("--wfmt", type=_fmt, default=QuantFormat.dint(4))
    a.add_argument("--optq", action=argparse.BooleanOptionalAction, default=False)
    a.add_argument("--damp", type=float, default=0.01)
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze)

    c = sub.add_parser("slac", help="write a calibration manifest windowed to one sequence length")
    manifest(c)
    c.add_argument("--target-len", type=int, required=True)
    c.add_argument("--out")
    c.set_defaults(func=cmd_slac)

    m = sub.add_parser("mac-check", help="compare the integer MAC model with the float reference")
    manifest(m)
    m.add_argument("--wfmt", type=_fmt, default=QuantFormat.dint(4))
    m.add_argument("--afmt", type=_fmt, default=QuantFormat.int(8))
    m.add_argument("--acc-bits", type=int, default=48)
    m.add_argument("--rtol", type=float, default=1e-6)
    m.set_defaults(func=cmd_mac_check)

    w = sub.add_parser("sweep-special", help="output mse per dINT special ratio")
    manifest(w)
    w.add_argument("--ratios", type=_float_list, default=[0.5, 0.25, 0.125])
    w.add_argument("--bits", type=int, default=4)
    w.add_argument("--afmt", type=_opt_fmt, default=None)
    w.add_argument("--optq", action=argparse.BooleanOptionalAction, default=False)
    w.add_argument("--damp", type=float, default=0.01)
    w.add_argument("--out")
    w.set_defaults(func=cmd_sweep_special)

    y = sub.add_parser("synth", help="write a synthetic capsule manifest")
    y.add_argument("--profile", choices=("stable", "expanding"), default="stable")
    y.add_argument("--layers", type=int, default=2)
    y.add_argument("--seed", type=int, default=0)
    y.add_argument("--M", type=int, default=16)
    y.add_argument("--C", type=int, default=32)
    y.add_argument("--lengths", type=_int_list, default=list(DEFAULT_LENGTHS))
    y.add_argument("--outliers", type=int, default=2)
    y.add_argument("--token-budget", type=int, default=2048)
    y.add_argument("--out", required=True)
    y.set_defaults(func=cmd_synth)
    return p


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "code": code, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be at least 1")
        return args.func(args)
    except UsageError as e:
        return _fail(EXIT_USAGE, "usage", str(e))
    except (NumericError, HessianError, AccumulatorOverflow, np.linalg.LinAlgError, FloatingPointError) as e:
        return _fail(EXIT_NUMERIC, type(e).__name__, str(e))
    except (ManifestError, TensorFormatError, FileNotFoundError, KeyError, ValueError, OSError) as e:
        return _fail(EXIT_DATA, type(e).__name__, str(e))


if __name__ == "__main__":
    sys.exit(main())
