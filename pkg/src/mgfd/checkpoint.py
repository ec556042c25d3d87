"""JSON checkpoints: an architecture descriptor plus flat named parameter arrays."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


class CheckpointError(ValueError):
    pass


def encode(arch: dict, params: dict[str, np.ndarray]) -> dict:
    return {
        "arch": arch,
        "params": {
            name: {"shape": list(a.shape), "data": np.asarray(a, dtype=np.float64).reshape(-1).tolist()}
            for name, a in params.items()
        },
    }


def decode(doc: dict, expected_shapes: dict[str, tuple[int, ...]]) -> dict[str, np.ndarray]:
    """Return arrays for ``expected_shapes``; reject missing, extra or mis-shaped entries."""
    stored = doc.get("params", {})
    missing = set(expected_shapes) - set(stored)
    extra = set(stored) - set(expected_shapes)
    if missing or extra:
        raise CheckpointError(f"parameter names differ (missing={sorted(missing)}, unexpected={sorted(extra)})")
    out = {}
    for name, shape in expected_shapes.items():
        entry = stored[name]
        if tuple(entry["shape"]) != tuple(shape):
            raise CheckpointError(f"{name}: stored shape {tuple(entry['shape'])} != expected {tuple(shape)}")
        data = np.asarray(entry["data"], dtype=np.float64)
        if data.size != int(np.prod(shape)):
            raise CheckpointError(f"{name}: {data.size} values for shape {tuple(shape)}")
        out[name] = data.reshape(shape)
    return out


def write_json(doc: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # float repr round-trips exactly, so checkpoints are bit-stable
    path.write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return json.loads(path.read_text(encoding="utf-8"))
