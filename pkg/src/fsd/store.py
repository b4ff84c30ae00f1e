"""Persistence: JSON model files and the binary FSDF feature-matrix format.

Model files look like::

    {"format_version": 1, "kind": "detector", "payload": {...}, "provenance": {...}}

Floats are written with Python's shortest round-trip repr, so a load/save
cycle reproduces the file byte for byte.  Non-finite floats are stored as the
strings ``"inf"``, ``"-inf"`` and ``"nan"``.

Feature files are ``b"FSDF"``, then little-endian u32 version, N and D,
then N*D little-endian float32 values row-major, then an optional UTF-8 label
block with one label per row separated by newlines.
"""
from __future__ import annotations

import datetime as _dt
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .errors import BadMagic, BadVersion, InvariantViolation, KindMismatch, SizeMismatch
from .filterbank import FilterBank
from .kmeans import ClusterAssignment
from .mixture import FeatureStats, GaussianMixture
from .tasks import AttributorModel, DetectorModel

FORMAT_VERSION = 1
KINDS = ("filter_bank", "detector", "attributor", "kmeans")
FEATURE_MAGIC = b"FSDF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIII")


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _enc(x: Any) -> Any:
    if isinstance(x, np.ndarray):
        return _enc(x.tolist())
    if isinstance(x, (list, tuple)):
        return [_enc(v) for v in x]
    if isinstance(x, dict):
        return {str(k): _enc(v) for k, v in x.items()}
    if isinstance(x, (np.floating, float)):
        x = float(x)
        if np.isnan(x):
            return "nan"
        if np.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    if isinstance(x, np.integer):
        return int(x)
    return x


def _num(x) -> float:
    if isinstance(x, str):
        if x in ("inf", "-inf", "nan"):
            return float(x)
        raise InvariantViolation(f"expected a number, got {x!r}")
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise InvariantViolation(f"expected a number, got {x!r}")
    return float(x)


def _array(x, ndim: int, name: str) -> np.ndarray:
    try:
        arr = np.array(x, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise InvariantViolation(f"{name}: not a numeric array ({exc})") from exc
    if arr.ndim != ndim:
        raise InvariantViolation(f"{name}: expected {ndim}-d array, got shape {arr.shape}")
    return arr


@dataclass
class ModelFile:
    kind: str
    model: Any
    provenance: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def timestamp() -> str:
    """UTC creation time; honours SOURCE_DATE_EPOCH for reproducible outputs."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is not None:
        when = _dt.datetime.fromtimestamp(int(epoch), tz=_dt.timezone.utc)
    else:
        when = _dt.datetime.now(tz=_dt.timezone.utc)
    return when.replace(microsecond=0).isoformat()


def _gmm_payload(g: GaussianMixture) -> dict:
    return {
        "weights": g.weights,
        "means": g.means,
        "variances": g.variances,
        "var_floor": g.var_floor,
        "feature_mean": g.stats.mean,
        "feature_std": g.stats.std,
    }


def _gmm_from(p: dict) -> GaussianMixture:
    stats = FeatureStats(_array(p["feature_mean"], 1, "feature_mean"), _array(p["feature_std"], 1, "feature_std"))
    return GaussianMixture(
        _array(p["weights"], 1, "weights"),
        _array(p["means"], 2, "means"),
        _array(p["variances"], 2, "variances"),
        stats,
        _num(p.get("var_floor", 1e-6)),
    )


def kind_of(model) -> str:
    if isinstance(model, FilterBank):
        return "filter_bank"
    if isinstance(model, DetectorModel):
        return "detector"
    if isinstance(model, AttributorModel):
        return "attributor"
    if isinstance(model, ClusterAssignment):
        return "kmeans"
    raise TypeError(f"cannot persist {type(model).__name__}")


def to_payload(model) -> dict:
    kind = kind_of(model)
    if kind == "filter_bank":
        return {"k": model.k, "m": model.m, "weights": model.weights, "bank_id": model.identity()}
    if kind == "detector":
        return {
            "threshold": model.threshold,
            "quantile": model.quantile,
            "n_validation": model.n_validation,
            "gmm": _gmm_payload(model.gmm),
        }
    if kind == "attributor":
        return {
            "threshold": model.threshold,
            "labels": model.labels,
            "sources": [_gmm_payload(model.sources[s]) for s in model.labels],
        }
    return {
        "k": model.k,
        "labels": model.labels,
        "centroids": model.centroids,
        "inertia": model.inertia,
        "iterations": model.iterations,
    }


def from_payload(kind: str, p: dict):
    try:
        if kind == "filter_bank":
            w = _array(p["weights"], 3, "weights")
            if w.shape[0] != p["k"] or w.shape[1] != p["m"]:
                raise InvariantViolation("declared k/m disagree with the weight array")
            return FilterBank(w)
        if kind == "detector":
            return DetectorModel(_gmm_from(p["gmm"]), _num(p["threshold"]), _num(p["quantile"]), int(p["n_validation"]))
        if kind == "attributor":
            labels = list(p["labels"])
            if len(set(labels)) != len(labels):
                raise InvariantViolation("source labels must be unique")
            if len(labels) != len(p["sources"]):
                raise InvariantViolation("one mixture per source label required")
            return AttributorModel({s: _gmm_from(g) for s, g in zip(labels, p["sources"])}, _num(p["threshold"]))
        if kind == "kmeans":
            labels = np.asarray(p["labels"], dtype=np.int64)
            k = int(p["k"])
            centroids = _array(p["centroids"], 2, "centroids")
            if centroids.shape[0] != k or (labels.size and (labels.min() < 0 or labels.max() >= k)):
                raise InvariantViolation("cluster indices must lie in [0, k)")
            return ClusterAssignment(labels, centroids, _num(p["inertia"]), k, int(p.get("iterations", 0)))
    except (KeyError, TypeError) as exc:
        raise InvariantViolation(f"malformed {kind} payload: {exc!r}") from exc
    raise KindMismatch(f"unknown model kind {kind!r}")


def dumps_model(mf: ModelFile) -> bytes:
    doc = {
        "format_version": mf.format_version,
        "kind": mf.kind,
        "payload": _enc(to_payload(mf.model)),
        "provenance": _enc(mf.provenance),
    }
    return (json.dumps(doc, sort_keys=True, indent=1, allow_nan=False) + "\n").encode("utf-8")


def save_model(model, path, provenance: Optional[dict] = None) -> ModelFile:
    """Write ``model`` (or a :class:`ModelFile`) atomically as JSON."""
    if isinstance(model, ModelFile):
        mf = model
    else:
        prov = dict(provenance or {})
        prov.setdefault("created", timestamp())
        mf = ModelFile(kind_of(model), model, prov)
    atomic_write(path, dumps_model(mf))
    return mf


def loads_model(data: bytes, expect: Optional[str] = None) -> ModelFile:
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BadMagic(f"not a model file: {exc}") from exc
    if not isinstance(doc, dict) or "format_version" not in doc or "kind" not in doc:
        raise BadMagic("not a model file: missing format_version/kind")
    if doc["format_version"] != FORMAT_VERSION:
        raise BadVersion(f"unsupported model format_version {doc['format_version']!r} (reader supports {FORMAT_VERSION})")
    kind = doc["kind"]
    if kind not in KINDS:
        raise KindMismatch(f"unknown model kind {kind!r}")
    if expect is not None and kind != expect:
        raise KindMismatch(f"expected a {expect} model, found {kind}")
    if not isinstance(doc.get("payload"), dict):
        raise InvariantViolation("model payload missing")
    return ModelFile(kind, from_payload(kind, doc["payload"]), doc.get("provenance", {}), FORMAT_VERSION)


def load_model(path, expect: Optional[str] = None) -> ModelFile:
    return loads_model(Path(path).read_bytes(), expect)


def dumps_features(features, labels=None) -> bytes:
    x = np.asarray(features, dtype="<f4")
    if x.ndim == 1 and x.size == 0:
        x = x.reshape(0, 0)
    if x.ndim != 2:
        raise SizeMismatch(f"features must be N x D, got shape {x.shape}")
    n, d = x.shape
    out = [_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, n, d), np.ascontiguousarray(x).tobytes()]
    if labels is not None:
        labels = [str(s) for s in labels]
        if len(labels) != n:
            raise SizeMismatch(f"{len(labels)} labels for {n} rows")
        if any("\n" in s or not s for s in labels):
            raise SizeMismatch("labels must be non-empty and newline-free")
        if n:
            out.append("\n".join(labels).encode("utf-8"))
    return b"".join(out)


def save_features(path, features, labels=None) -> None:
    atomic_write(path, dumps_features(features, labels))


def loads_features(data: bytes):
    """Return ``(matrix float32 N x D, labels or None)``."""
    if len(data) < _HEADER.size:
        raise BadMagic("feature file shorter than its header")
    magic, version, n, d = _HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise BadMagic(f"bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
    if version != FEATURE_VERSION:
        raise BadVersion(f"unsupported feature file version {version}")
    end = _HEADER.size + 4 * n * d
    if len(data) < end:
        raise SizeMismatch(f"declared {n}x{d} values but file holds {(len(data) - _HEADER.size) // 4}")
    x = np.frombuffer(data, dtype="<f4", count=n * d, offset=_HEADER.size).reshape(n, d).copy()
    rest = data[end:]
    labels = None
    if rest:
        labels = rest.decode("utf-8").split("\n")
        if len(labels) != n:
            raise SizeMismatch(f"{len(labels)} labels for {n} rows")
    return x, labels


def load_features(path):
    return loads_features(Path(path).read_bytes())
