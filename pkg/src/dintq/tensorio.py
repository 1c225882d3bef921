"""QTEN tensor container, layer-capsule manifests and synthetic capsules.

Container layout (little-endian throughout)::

    magic   b"QTEN"        4 bytes
    version u32            currently 1
    dtype   u8             0 = f32, 1 = f64
    ndim    u8
    dims    u64 * ndim
    payload row-major elements

Tensors are plain :class:`numpy.ndarray` objects of dtype float32 or float64.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

MAGIC = b"QTEN"
VERSION = 1
MANIFEST_VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_OF = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_HEADER = struct.Struct("<4sIBB")
_MAX_ELEMENTS = 1 << 40


class TensorFormatError(ValueError):
    """Raised for malformed QTEN files or tensors violating the container invariants."""


class ManifestError(ValueError):
    """Raised for manifests that do not parse or reference inconsistent data."""


def check_tensor(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t)
    if t.dtype not in _CODE_OF:
        raise TensorFormatError(f"unsupported dtype {t.dtype}; expected float32 or float64")
    if any(d == 0 for d in t.shape):
        raise TensorFormatError("zero dimension")
    if not np.all(np.isfinite(t)):
        raise TensorFormatError("non-finite element")
    return t


def encode_tensor(t: np.ndarray) -> bytes:
    t = check_tensor(t)
    if t.ndim > 255:
        raise TensorFormatError("too many dimensions")
    code = _CODE_OF[t.dtype]
    header = _HEADER.pack(MAGIC, VERSION, code, t.ndim)
    dims = struct.pack(f"<{t.ndim}Q", *t.shape)
    payload = np.ascontiguousarray(t, dtype=_DTYPE_CODES[code]).tobytes()
    return header + dims + payload


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise TensorFormatError("truncated header")
    magic, version, code, ndim = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise TensorFormatError("bad magic")
    if version != VERSION:
        raise TensorFormatError(f"unsupported container version {version}")
    if code not in _DTYPE_CODES:
        raise TensorFormatError(f"unknown dtype code {code}")
    off = _HEADER.size
    if len(buf) < off + 8 * ndim:
        raise TensorFormatError("truncated header")
    dims = struct.unpack_from(f"<{ndim}Q", buf, off)
    off += 8 * ndim
    if any(d == 0 for d in dims):
        raise TensorFormatError("zero dimension")
    count = 1
    for d in dims:
        count *= d
        if count > _MAX_ELEMENTS:
            raise TensorFormatError("dimension overflow")
    dtype = _DTYPE_CODES[code]
    nbytes = count * dtype.itemsize
    if len(buf) - off < nbytes:
        raise TensorFormatError("truncated payload")
    if len(buf) - off > nbytes:
        raise TensorFormatError("trailing bytes after payload")
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=off).reshape(dims)
    data = data.astype(dtype.newbyteorder("="), copy=True)
    if not np.all(np.isfinite(data)):
        raise TensorFormatError("non-finite element")
    return data


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    """Read a QTEN file and return its array (dtype and shape exactly as stored)."""
    return decode_tensor(Path(path).read_bytes())


def write_tensor(t: np.ndarray, path: str | os.PathLike) -> None:
    Path(path).write_bytes(encode_tensor(t))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = check_tensor(a)
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LayerCapsule:
    """A weight matrix with the activations captured for it.

    ``weight`` has shape ``(M, C)``; each activation tensor has shape ``(C, T)``
    and is keyed by the sequence length it was captured at. ``value`` is an
    optional ``(D, T)`` Value-cache tensor (channels by tokens).
    """

    name: str
    weight: np.ndarray
    activations: Mapping[int, np.ndarray] = field(default_factory=dict)
    value: Optional[np.ndarray] = None

    def __post_init__(self):
        w = _frozen(self.weight)
        if w.ndim != 2:
            raise ManifestError(f"{self.name}: weight must be 2-D, got shape {w.shape}")
        acts = {}
        for length in sorted(self.activations):
            if not isinstance(length, (int, np.integer)) or isinstance(length, bool) or length <= 0:
                raise ManifestError(f"{self.name}: sequence length keys must be positive integers")
            x = _frozen(self.activations[length])
            if x.ndim != 2:
                raise ManifestError(f"{self.name}: activation must be 2-D, got shape {x.shape}")
            if x.shape[0] != w.shape[1]:
                raise ManifestError(
                    f"{self.name}: C mismatch (weight C={w.shape[1]}, activation C={x.shape[0]})"
                )
            acts[int(length)] = x
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "activations", acts)
        if self.value is not None:
            object.__setattr__(self, "value", _frozen(self.value))

    @property
    def lengths(self) -> list[int]:
        return list(self.activations)

    def tokens(self, length: Optional[int] = None) -> np.ndarray:
        """Activations used for calibration: one stored length, or all lengths
        concatenated along the token axis in ascending length order."""
        if length is not None:
            if length not in self.activations:
                raise KeyError(f"{self.name}: no activations stored for length {length}")
            return self.activations[length]
        if not self.activations:
            raise ValueError(f"{self.name}: capsule has no activations")
        return np.concatenate([self.activations[k] for k in self.lengths], axis=1)

    def replace(self, **changes) -> "LayerCapsule":
        kw = dict(name=self.name, weight=self.weight, activations=self.activations, value=self.value)
        kw.update(changes)
        return LayerCapsule(**kw)


def _resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def read_manifest(path: str | os.PathLike) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ManifestError(f"manifest does not parse: {e}") from e
    if not isinstance(doc, dict) or not isinstance(doc.get("layers"), list):
        raise ManifestError("manifest must be an object with a 'layers' list")
    if doc.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest version {doc.get('version')!r}")
    names = [entry.get("name") for entry in doc["layers"]]
    if any(not isinstance(n, str) or not n for n in names):
        raise ManifestError("every layer needs a non-empty name")
    if len(set(names)) != len(names):
        raise ManifestError("duplicate layer names")
    return doc


def load_capsules(manifest: str | os.PathLike) -> list[LayerCapsule]:
    """Load every layer of a manifest, in manifest order."""
    manifest = Path(manifest)
    doc = read_manifest(manifest)
    base = manifest.parent
    capsules = []
    for entry in doc["layers"]:
        name = entry["name"]
        try:
            weight = read_tensor(_resolve(base, entry["weight"]))
            acts = {}
            for key, p in entry.get("activations", {}).items():
                try:
                    length = int(key)
                except ValueError:
                    raise ManifestError(f"{name}: sequence length key {key!r} is not an integer")
                acts[length] = read_tensor(_resolve(base, p))
            value = entry.get("value")
            value = read_tensor(_resolve(base, value)) if value else None
        except FileNotFoundError as e:
            raise ManifestError(f"{name}: missing file {e.filename}") from e
        except KeyError as e:
            raise ManifestError(f"{name}: missing field {e}") from e
        capsules.append(LayerCapsule(name, weight, acts, value))
    return capsules


def save_capsules(capsules, out_dir: str | os.PathLike, manifest_name: str = "manifest.json",
                  tensor_dir: str = "") -> Path:
    """Write capsules as QTEN files (under ``out_dir/tensor_dir``) plus a manifest
    at ``out_dir/manifest_name``; returns the manifest path."""
    out = Path(out_dir)
    (out / tensor_dir).mkdir(parents=True, exist_ok=True)

    def put(t, fname):
        rel = f"{tensor_dir}/{fname}" if tensor_dir else fname
        write_tensor(t, out / rel)
        return rel

    layers = []
    for cap in capsules:
        entry = {"name": cap.name, "weight": put(cap.weight, f"{cap.name}.weight.qten"), "activations": {}}
        for length, x in cap.activations.items():
            entry["activations"][str(length)] = put(x, f"{cap.name}.x{length}.qten")
        if cap.value is not None:
            entry["value"] = put(cap.value, f"{cap.name}.value.qten")
        layers.append(entry)
    path = out / manifest_name
    path.write_text(json.dumps({"version": MANIFEST_VERSION, "layers": layers}, indent=2) + "\n",
                    encoding="utf-8")
    return path


# -- synthetic fixtures -------------------------------------------------------

DEFAULT_LENGTHS = (32, 64, 128, 512, 2048)
PROFILES = ("stable", "expanding")


@dataclass(frozen=True)
class SynthSpec:
    M: int
    C: int
    T: int = 0
    profile: str = "stable"
    seed: int = 0
    lengths: tuple[int, ...] = DEFAULT_LENGTHS
    n_outliers: int = 2
    outlier_gain: float = 20.0
    with_value: bool = True
    name: str = "layer0"
    token_budget: int = 2048


def _channel_scales(rng: np.random.Generator, C: int, n_outliers: int, gain: float) -> np.ndarray:
    sigma = np.exp(rng.normal(0.0, 0.35, size=C))
    if n_outliers:
        idx = rng.choice(C, size=min(n_outliers, C), replace=False)
        sigma[idx] *= gain
    return sigma


def _activation_block(rng: np.random.Generator, peak: np.ndarray, T: int) -> np.ndarray:
    """Tokens bounded strictly inside ``(-peak, peak)`` with one pinned token per
    channel at exactly ``+peak``, so the per-channel max equals ``peak``."""
    C = peak.shape[0]
    body = np.tanh(rng.normal(0.0, 0.8, size=(C, T))) * 0.95
    pos = rng.integers(0, T, size=C)
    body[np.arange(C), pos] = 1.0
    return (peak[:, None] * body).astype(np.float32)


def synth_capsule(spec: SynthSpec) -> LayerCapsule:
    """Deterministic synthetic layer capsule.

    ``stable``: every length draws tokens from one fixed distribution and the
    per-channel maximum is identical at every length.
    ``expanding``: each channel's magnitude grows as ``(L/32)**g_c`` with a
    per-channel rate ``g_c``, so channel maxima grow with sequence length and
    their relative sizes drift.

    Each length ``L`` holds ``max(1, token_budget // L)`` sequences of ``L``
    tokens laid side by side, so ``(C, n_seq * L)``. If ``spec.T`` is positive
    it is used as the single sequence length.
    """
    if spec.M <= 0 or spec.C <= 0:
        raise ValueError("dimensions must be positive")
    if spec.profile not in PROFILES:
        raise ValueError(f"unknown activation profile {spec.profile!r}")
    lengths = (spec.T,) if spec.T > 0 else tuple(spec.lengths)
    if any(L <= 0 for L in lengths):
        raise ValueError("sequence lengths must be positive")

    rng = np.random.default_rng([spec.seed, 0])
    sigma = _channel_scales(rng, spec.C, spec.n_outliers, spec.outlier_gain)
    growth = rng.uniform(0.1, 1.0, size=spec.C)
    weight = (rng.normal(0.0, 1.0, size=(spec.M, spec.C)) / np.sqrt(spec.C)).astype(np.float32)

    acts = {}
    for L in sorted(set(lengths)):
        if spec.profile == "stable":
            peak = sigma
        else:
            peak = sigma * (L / 32.0) ** growth
        n_seq = max(1, spec.token_budget // L)
        acts[L] = _activation_block(np.random.default_rng([spec.seed, 1, L]), peak, n_seq * L)

    value = None
    if spec.with_value:
        vr = np.random.default_rng([spec.seed, 2])
        value = vr.normal(0.0, 1.0, size=(spec.M, min(lengths))).astype(np.float32)
    return LayerCapsule(spec.name, weight, acts, value)
