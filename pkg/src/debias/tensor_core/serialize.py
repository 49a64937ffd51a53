"""Checkpoint directories: ``manifest.json`` plus a flat ``params.bin``."""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np

from .rng import RngState

MANIFEST = "manifest.json"
PARAMS = "params.bin"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_arrays(path: str | os.PathLike, arrays: dict[str, np.ndarray], rng: RngState | None = None,
                step: int = 0, meta: dict | None = None) -> Path:
    """Write ``arrays`` (stored as little-endian float32) atomically into directory ``path``.

    The directory is assembled under a temporary name and renamed into place,
    so a crash never leaves a half-written checkpoint behind.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        entries = []
        offset = 0
        with open(tmp / PARAMS, "wb") as fh:
            for name, arr in arrays.items():
                a = np.ascontiguousarray(arr, dtype="<f4")
                fh.write(a.tobytes())
                entries.append({"name": name, "shape": list(a.shape), "dtype": "float32",
                                "offset": offset, "nbytes": a.nbytes})
                offset += a.nbytes
        manifest = {
            "format": FORMAT_VERSION,
            "step": int(step),
            "rng": rng.to_dict() if rng is not None else None,
            "tensors": entries,
            "meta": meta or {},
        }
        (tmp / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
        old = None
        if path.exists():
            old = path.with_name(f".{path.name}.old")
            if old.exists():
                shutil.rmtree(old)
            os.replace(path, old)
        os.replace(tmp, path)
        if old is not None:
            shutil.rmtree(old)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def load_arrays(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], RngState | None, int, dict]:
    """Inverse of :func:`save_arrays`: returns (arrays, rng, step, meta)."""
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
        blob = (path / PARAMS).read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"incomplete checkpoint at {path}: {exc.filename} missing") from exc
    arrays: dict[str, np.ndarray] = {}
    for e in manifest["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(blob):
            raise CheckpointError(f"{path / PARAMS} truncated while reading {e['name']}")
        a = np.frombuffer(blob, dtype="<f4", count=e["nbytes"] // 4, offset=e["offset"])
        arrays[e["name"]] = a.reshape(e["shape"]).astype(np.float32)
    rng = RngState.from_dict(manifest["rng"]) if manifest.get("rng") else None
    return arrays, rng, int(manifest["step"]), manifest.get("meta", {})
