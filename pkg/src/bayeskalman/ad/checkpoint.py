"""JSON parameter checkpoints.

Layout::

    {"format": "bayeskalman-checkpoint", "version": 1, "meta": {...},
     "parameters": {"<path>": {"shape": [...], "values": [...]}, ...},
     "buffers": {"<name>": {"shape": [...], "values": [...]}, ...}}

Values are row-major; Python's float repr round-trips doubles exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT = "bayeskalman-checkpoint"
VERSION = 1


def _pack(arrays: dict):
    return {k: {"shape": list(np.shape(v)), "values": [float(x) for x in np.ravel(v)]} for k, v in arrays.items()}


def _unpack(entries: dict):
    return {k: np.array(e["values"], dtype=float).reshape(e["shape"]) for k, e in entries.items()}


def dumps(parameters: dict, buffers: dict | None = None, meta: dict | None = None) -> str:
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "meta": meta or {},
        "parameters": _pack(parameters),
        "buffers": _pack(buffers or {}),
    }
    return json.dumps(doc)


def loads(text: str):
    doc = json.loads(text)
    if doc.get("format") != FORMAT:
        raise ValueError("not a bayeskalman checkpoint")
    if doc.get("version") != VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    return _unpack(doc["parameters"]), _unpack(doc.get("buffers", {})), doc.get("meta", {})


def save(path, parameters: dict, buffers: dict | None = None, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(parameters, buffers, meta))
    return path


def load(path):
    return loads(Path(path).read_text())
