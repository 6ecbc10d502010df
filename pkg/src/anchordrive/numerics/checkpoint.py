"""Checkpoint serialization: a JSON manifest naming parameters and their
shapes, next to a raw blob of little-endian float64 values in manifest
order."""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .layers import ParameterSet

__all__ = ["save_checkpoint", "load_checkpoint", "CheckpointError",
           "MANIFEST_NAME", "WEIGHTS_NAME"]

MANIFEST_NAME = "manifest.json"
WEIGHTS_NAME = "weights.bin"
_FORMAT = "anchordrive-checkpoint"


class CheckpointError(ValueError):
    pass


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_checkpoint(directory: str | Path, params: ParameterSet,
                    config: dict, extra: dict | None = None) -> None:
    """Write manifest + weight blob into ``directory`` (created if needed).

    Both files are written atomically so an interrupted save never leaves
    a half-written checkpoint behind.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": _FORMAT,
        "format_version": 1,
        "config": config,
        "extra": extra or {},
        "params": [{"name": p.name, "shape": list(p.data.shape)} for p in params],
    }
    blob = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in params)
    _atomic_write(directory / WEIGHTS_NAME, blob)
    _atomic_write(directory / MANIFEST_NAME,
                  json.dumps(manifest, indent=1, sort_keys=True).encode() + b"\n")


def load_checkpoint(directory: str | Path) -> tuple[dict[str, np.ndarray], dict, dict]:
    """Read a checkpoint back as (values-by-name, config, extra)."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise CheckpointError(f"no checkpoint manifest at {manifest_path}")
    with open(manifest_path, "rb") as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as err:
            raise CheckpointError(f"corrupt manifest {manifest_path}: {err}") from err
    if manifest.get("format") != _FORMAT:
        raise CheckpointError(f"{manifest_path} is not a {_FORMAT} manifest")
    blob = (directory / WEIGHTS_NAME).read_bytes()
    expected = sum(int(np.prod(e["shape"])) for e in manifest["params"]) * 8
    if len(blob) != expected:
        raise CheckpointError(
            f"weight blob holds {len(blob)} bytes, manifest expects {expected}"
        )
    values: dict[str, np.ndarray] = {}
    offset = 0
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) * 8
        arr = np.frombuffer(blob[offset:offset + n], dtype="<f8").reshape(shape)
        values[entry["name"]] = arr.astype(np.float64)
        offset += n
    return values, manifest["config"], manifest["extra"]
