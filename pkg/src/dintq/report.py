"""JSON / TSV emission with fixed numeric precision, and schema validation."""

from __future__ import annotations

import json
import math
from importlib import resources
from pathlib import Path

import numpy as np

SIG_DIGITS = 9


def round_sig(obj):
    """Recursively round floats to 9 significant digits; numpy scalars/arrays become Python types."""
    if isinstance(obj, dict):
        return {str(k): round_sig(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [round_sig(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return round_sig(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            raise ValueError("non-finite value in report")
        return float(f"{x:.{SIG_DIGITS}g}")
    return obj


def dumps(obj) -> str:
    return json.dumps(round_sig(obj), indent=2) + "\n"


def write_json(obj, path) -> None:
    Path(path).write_text(dumps(obj), encoding="utf-8")


def fmt_num(x) -> str:
    return f"{float(x):.{SIG_DIGITS}g}"


def tsv(header, rows) -> str:
    lines = ["\t".join(header)]
    for row in rows:
        lines.append("\t".join(fmt_num(v) if isinstance(v, (float, np.floating)) else str(v) for v in row))
    return "\n".join(lines) + "\n"


def load_schema(name: str) -> dict:
    return json.loads(resources.files("dintq").joinpath("schemas", f"{name}.schema.json").read_text())


def validate(doc, name: str) -> None:
    """Validate against a shipped schema (requires ``jsonschema``)."""
    import jsonschema

    jsonschema.validate(doc, load_schema(name))
