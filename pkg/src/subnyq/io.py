"""Array containers: little-endian float32 blocks with a JSON sidecar.

``name.bin`` holds the raw block; ``name.bin.json`` records the shape, element type,
kind, format version and free-form metadata.  Complex arrays are stored as
interleaved (real, imag) float32 pairs.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class ContainerError(ValueError):
    pass


def sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_array(path, array, kind: str, meta: dict | None = None) -> Path:
    path = Path(path)
    arr = np.asarray(array)
    is_complex = np.iscomplexobj(arr)
    block = np.stack([arr.real, arr.imag], axis=-1) if is_complex else arr
    block = np.ascontiguousarray(block, dtype="<f4")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(block.tobytes())
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "shape": list(arr.shape),
        "dtype": "complex64-pairs" if is_complex else "float32",
        "meta": meta or {},
    }
    sidecar(path).write_text(json.dumps(header, sort_keys=True, indent=1) + "\n")
    return path


def read_header(path) -> dict:
    side = sidecar(path)
    if not side.exists():
        raise ContainerError(f"{path}: missing sidecar {side.name}")
    try:
        header = json.loads(side.read_text())
    except json.JSONDecodeError as exc:
        raise ContainerError(f"{side}: malformed sidecar ({exc})") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise ContainerError(f"{path}: format version {header.get('format_version')} is not {FORMAT_VERSION}")
    return header


def load_array(path, kind: str | tuple[str, ...] | None = None) -> tuple[np.ndarray, dict]:
    """Returns the array (float64 or complex128) and its metadata."""
    path = Path(path)
    if not path.exists():
        raise ContainerError(f"{path}: no such file")
    header = read_header(path)
    kinds = (kind,) if isinstance(kind, str) else kind
    if kinds is not None and header.get("kind") not in kinds:
        raise ContainerError(f"{path}: holds {header.get('kind')!r}, expected {' or '.join(kinds)}")
    shape = tuple(header["shape"])
    is_complex = header["dtype"] == "complex64-pairs"
    count = int(np.prod(shape)) * (2 if is_complex else 1)
    raw = path.read_bytes()
    if len(raw) != 4 * count:
        raise ContainerError(f"{path}: expected {4 * count} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4").astype(float)
    if is_complex:
        data = data.reshape(shape + (2,))
        arr = data[..., 0] + 1j * data[..., 1]
    else:
        arr = data.reshape(shape)
    return arr, header["meta"]
