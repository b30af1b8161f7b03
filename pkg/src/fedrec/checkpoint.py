"""Flat float64 checkpoints: ``<stem>.bin`` holds the little-endian array, ``<stem>.json`` the sidecar."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import IntegrityError


def checksum(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for arr in arrays:
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


def save_checkpoint(stem: str | Path, flat: np.ndarray, shapes: dict, meta: dict | None = None) -> None:
    stem = Path(stem)
    data = np.ascontiguousarray(flat, dtype="<f8")
    stem.with_suffix(".bin").write_bytes(data.tobytes())
    sidecar = {
        "dtype": "<f8",
        "length": int(data.size),
        "shapes": {k: list(v) for k, v in shapes.items()},
        "sha256": checksum(data),
        **(meta or {}),
    }
    stem.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_checkpoint(stem: str | Path) -> tuple[np.ndarray, dict]:
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text())
    flat = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype="<f8").astype(np.float64)
    if flat.size != meta["length"]:
        raise IntegrityError(f"{stem}: expected {meta['length']} values, found {flat.size}")
    if checksum(flat) != meta["sha256"]:
        raise IntegrityError(f"{stem}: content hash mismatch")
    return flat, meta
