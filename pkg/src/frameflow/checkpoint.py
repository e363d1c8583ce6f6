"""Bit-exact parameter persistence.

A checkpoint is a pair of files: `<stem>.json` carrying an ordered manifest
(name, shape, offset per entry plus arbitrary metadata) and `<stem>.bin`
holding every buffer concatenated as little-endian float64. Round-tripping
reproduces each array byte for byte, which the determinism tests rely on.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DataError
from .tensor import Tensor

MAGIC = "frameflow-checkpoint-v1"


def _buffer(value) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value)


def save_checkpoint(stem: str | Path, params: dict[str, Tensor],
                    metadata: dict | None = None) -> None:
    stem = Path(stem)
    entries = []
    chunks = []
    offset = 0
    for name in sorted(params):
        arr = np.ascontiguousarray(_buffer(params[name]), dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    manifest = {
        "format": MAGIC,
        "total_values": offset,
        "entries": entries,
        "metadata": metadata or {},
    }
    stem.parent.mkdir(parents=True, exist_ok=True)
    stem.with_suffix(".json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    stem.with_suffix(".bin").write_bytes(b"".join(chunks))


def load_checkpoint(stem: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    stem = Path(stem)
    try:
        manifest = json.loads(stem.with_suffix(".json").read_text())
    except FileNotFoundError as e:
        raise DataError(f"checkpoint manifest missing: {e.filename}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"checkpoint manifest is not valid JSON: {e}") from e
    if manifest.get("format") != MAGIC:
        raise DataError(f"unrecognized checkpoint format: {manifest.get('format')!r}")
    raw = stem.with_suffix(".bin").read_bytes()
    flat = np.frombuffer(raw, dtype="<f8")
    if flat.size != manifest["total_values"]:
        raise DataError(
            f"checkpoint buffer holds {flat.size} values, manifest expects "
            f"{manifest['total_values']}")
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["entries"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        block = flat[entry["offset"]:entry["offset"] + size]
        if block.size != size:
            raise DataError(f"checkpoint entry {entry['name']!r} is truncated")
        arrays[entry["name"]] = block.reshape(shape).astype(np.float64)
    return arrays, manifest.get("metadata", {})


def restore_params(params: dict[str, Tensor], arrays: dict[str, np.ndarray]) -> None:
    missing = sorted(set(params) - set(arrays))
    extra = sorted(set(arrays) - set(params))
    if missing or extra:
        raise DataError(f"checkpoint/model mismatch: missing={missing} extra={extra}")
    for name, p in params.items():
        if arrays[name].shape != p.data.shape:
            raise DataError(
                f"checkpoint entry {name!r} has shape {arrays[name].shape}, "
                f"model expects {p.data.shape}")
        p.data = arrays[name].copy()
        p.grad = None


def parameter_checksum(params: dict[str, Tensor]) -> str:
    """Order-independent content hash over (name, bytes) pairs."""
    import hashlib
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(_buffer(params[name]), dtype="<f8").tobytes())
    return h.hexdigest()
