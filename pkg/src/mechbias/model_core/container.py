"""Manifest + raw blob tensor container shared by model and probe files.

Layout::

    <name>.json   manifest: {"format", "format_version", "kind", "blob",
                             "tensors": [{"name", "dtype", "shape", "offset", "length"}],
                             ...kind-specific fields}
    <name>.bin    little-endian float32 values, row-major, tensors back to back

``offset`` and ``length`` are byte counts into the blob. Tensors are written in
manifest order without padding, so offsets are cumulative lengths.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np

from ..errors import MissingTensor, SchemaError, ShapeMismatch

FORMAT = "mechbias-tensors"
FORMAT_VERSION = 1
DTYPE = "float32"
_LE_F32 = np.dtype("<f4")


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def write_container(
    manifest_path: str | Path,
    tensors: dict[str, np.ndarray],
    *,
    kind: str,
    extra: dict[str, Any] | None = None,
) -> Path:
    manifest_path = Path(manifest_path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    blob_path = manifest_path.with_suffix(".bin")
    entries = []
    offset = 0
    chunks = []
    for name, array in tensors.items():
        data = np.ascontiguousarray(array, dtype=_LE_F32).tobytes(order="C")
        entries.append(
            {
                "name": name,
                "dtype": DTYPE,
                "shape": [int(s) for s in np.shape(array)],
                "offset": offset,
                "length": len(data),
            }
        )
        chunks.append(data)
        offset += len(data)
    blob_path.write_bytes(b"".join(chunks))
    manifest = {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "blob": blob_path.name,
        "tensors": entries,
    }
    manifest.update(extra or {})
    manifest_path.write_text(canonical_json(manifest), encoding="utf-8")
    return manifest_path


def read_manifest(manifest_path: str | Path) -> dict[str, Any]:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise MissingTensor(f"manifest {manifest_path} does not exist", subject=str(manifest_path))
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"manifest is not valid JSON: {exc}", subject=str(manifest_path)) from exc
    for key in ("format", "blob", "tensors"):
        if key not in manifest:
            raise SchemaError(f"manifest missing field {key!r}", subject=str(manifest_path))
    if manifest["format"] != FORMAT:
        raise SchemaError(f"unexpected format {manifest['format']!r}", subject=str(manifest_path))
    return manifest


def read_container(manifest_path: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    """Return the manifest and every declared tensor as a read-only float32 array."""
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    blob_path = manifest_path.parent / manifest["blob"]
    if not blob_path.exists():
        raise MissingTensor(f"blob {blob_path} does not exist", subject=str(blob_path))
    blob = blob_path.read_bytes()
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        name = entry.get("name", "?")
        if entry.get("dtype") != DTYPE:
            raise ShapeMismatch(f"tensor {name}: unsupported dtype {entry.get('dtype')!r}", subject=name)
        shape = tuple(int(s) for s in entry["shape"])
        offset, length = int(entry["offset"]), int(entry["length"])
        expected = int(np.prod(shape, dtype=np.int64)) * 4
        if length != expected:
            raise ShapeMismatch(
                f"tensor {name}: shape {list(shape)} needs {expected} bytes, manifest declares {length}",
                subject=name,
            )
        if offset < 0 or offset + length > len(blob):
            raise ShapeMismatch(
                f"tensor {name}: bytes [{offset}, {offset + length}) exceed blob size {len(blob)}",
                subject=name,
            )
        array = np.frombuffer(blob, dtype=_LE_F32, count=expected // 4, offset=offset).reshape(shape)
        array = array.astype(np.float32)
        array.setflags(write=False)
        tensors[name] = array
    return manifest, tensors
