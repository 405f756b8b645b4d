"""Checkpoint layout: a directory holding ``manifest.json`` and ``arrays.npz``.

The manifest is plain JSON (config, counters, provenance) and lists every
array with its shape; the arrays are little-endian float64.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np


class CheckpointError(ValueError):
    pass


def save(path: str | Path, kind: str, manifest: dict, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = {k: np.ascontiguousarray(v, dtype="<f8") for k, v in arrays.items()}
    body = {
        "kind": kind,
        **manifest,
        "arrays": {k: list(v.shape) for k, v in sorted(arrays.items())},
    }
    (path / "manifest.json").write_text(json.dumps(body, indent=2, sort_keys=True))
    # np.savez writes zip entries with fixed timestamps, so equal arrays give equal bytes
    with open(path / "arrays.npz", "wb") as fh:
        np.savez(fh, **dict(sorted(arrays.items())))
    return path


def load(path: str | Path, kind: str) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    manifest = json.loads(mf.read_text())
    if manifest.get("kind") != kind:
        raise CheckpointError(f"{path} holds a {manifest.get('kind')!r} checkpoint, expected {kind!r}")
    with np.load(path / "arrays.npz") as z:
        arrays = {k: z[k].copy() for k in z.files}
    for name, shape in manifest["arrays"].items():
        if name not in arrays or list(arrays[name].shape) != shape:
            raise CheckpointError(f"array {name!r} missing or mis-shaped in {path}")
    return manifest, arrays
