"""Versioned JSON container for fitted models.

Layout::

    {"format": "volt-model", "version": 1, "meta": {...}, "model": <node>}

A node is a JSON scalar, a list, ``{"__type__": name, ...init fields}`` for a
registered dataclass, ``{"__tuple__": [...]}``, or
``{"__ndarray__": values, "shape": [...], "tril": bool}``. Square lower
triangular matrices store only their lower triangle. Floats round-trip
exactly because ``json`` writes ``repr`` values.
"""

from __future__ import annotations

import dataclasses
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from . import gp, gpcv, kernels, means, volt

FORMAT = "volt-model"
VERSION = 1

_REGISTRY = {cls.__name__: cls for cls in (
    gp.GPModel, gpcv.GPCVModel, gpcv.MTGPCVModel, gpcv.VolatilityPath,
    kernels.BrownianKernel, kernels.VoltKernel, kernels.MaternKernel, kernels.ICMKernel,
    kernels.IntertaskCovariance, kernels.GeodesicKernel,
    means.DriftMean, means.MagpieMean, means.TaskDriftMean,
    volt.VoltConfig, volt.VoltModel, volt.MTVoltModel,
)}


class ArtifactError(ValueError):
    """The file is not a readable model artifact."""


def _encode(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        name = type(obj).__name__
        if name not in _REGISTRY:
            raise TypeError(f"cannot serialize {name}")
        node = {"__type__": name}
        for f in dataclasses.fields(obj):
            if f.init:
                node[f.name] = _encode(getattr(obj, f.name))
        return node
    if isinstance(obj, np.ndarray):
        a = np.asarray(obj, dtype=float)
        tril = a.ndim == 2 and a.shape[0] == a.shape[1] and a.size > 1 and not np.any(np.triu(a, 1))
        values = a[np.tril_indices(a.shape[0])] if tril else a.ravel()
        return {"__ndarray__": values.tolist(), "shape": list(a.shape), "tril": bool(tril)}
    if isinstance(obj, tuple):
        return {"__tuple__": [_encode(x) for x in obj]}
    if isinstance(obj, list):
        return [_encode(x) for x in obj]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if obj is None or isinstance(obj, (bool, int, float, str)):
        return obj
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _decode(node):
    if isinstance(node, list):
        return [_decode(x) for x in node]
    if not isinstance(node, dict):
        return node
    if "__ndarray__" in node:
        shape = tuple(node["shape"])
        values = np.asarray(node["__ndarray__"], dtype=float)
        if node.get("tril"):
            out = np.zeros(shape)
            out[np.tril_indices(shape[0])] = values
            return out
        return values.reshape(shape)
    if "__tuple__" in node:
        return tuple(_decode(x) for x in node["__tuple__"])
    name = node.get("__type__")
    if name not in _REGISTRY:
        raise ArtifactError(f"unknown type {name!r} in artifact")
    kwargs = {k: _decode(v) for k, v in node.items() if k != "__type__"}
    return _REGISTRY[name](**kwargs)


def dumps(model, meta: dict | None = None) -> str:
    doc = {"format": FORMAT, "version": VERSION, "meta": meta or {}, "model": _encode(model)}
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def loads(text: str):
    """Returns ``(model, meta)``."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"artifact is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise ArtifactError("not a volt model artifact")
    if doc.get("version") != VERSION:
        raise ArtifactError(f"unsupported artifact version {doc.get('version')!r}")
    return _decode(doc["model"]), doc.get("meta", {})


def atomic_write(path, text: str) -> Path:
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def save_model(model, path, meta: dict | None = None) -> Path:
    return atomic_write(path, dumps(model, meta))


def load_model(path):
    """Returns ``(model, meta)``; raises ``FileNotFoundError`` or :class:`ArtifactError`."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing file: {path}")
    return loads(path.read_text())
