"""DPTN binary tensor files and manifest-based checkpoint directories.

Layout of a ``.dptn`` file::

    b"DPTN" | u8 version=1 | u8 dtype (0=f32, 1=f64) | u32 ndim | ndim x u32 dims | payload

All integers and the IEEE-754 payload are little-endian, payload row-major.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DPTN"
VERSION = 1
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    pass


def to_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _CODES:
        raise FormatError(f"DPTN stores only f32/f64, got {arr.dtype}")
    code = _CODES[arr.dtype]
    header = MAGIC + struct.pack("<BBI", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def from_bytes(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise FormatError("bad magic, not a DPTN file")
    version, code, ndim = struct.unpack_from("<BBI", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported DPTN version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    off = 4 + 6
    dims = struct.unpack_from(f"<{ndim}I", buf, off)
    off += 4 * ndim
    dt = _DTYPES[code]
    count = int(np.prod(dims)) if ndim else 1
    if len(buf) - off != count * dt.itemsize:
        raise FormatError(f"payload size {len(buf) - off} does not match shape {dims}")
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(dims)
    return arr.astype(dt.newbyteorder("="))


def save(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(to_bytes(arr))


def load(path) -> np.ndarray:
    return from_bytes(Path(path).read_bytes())


def save_state(directory, state: dict[str, np.ndarray], extra: dict | None = None) -> None:
    """Write ``manifest.json`` plus one DPTN file per named array.

    Names may contain ``/`` namespaces (``dpade/queries``); these become
    subdirectories.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, arr in state.items():
        rel = name + ".dptn"
        target = directory / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        save(target, arr)
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": "f32" if arr.dtype == np.float32 else "f64",
            "file": rel,
        })
    manifest = {"format": "DPTN", "version": VERSION, "tensors": entries}
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_state(directory) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    state = {}
    for entry in manifest["tensors"]:
        arr = load(directory / entry["file"])
        if list(arr.shape) != list(entry["shape"]):
            raise FormatError(f"{entry['name']}: file shape {arr.shape} != manifest {entry['shape']}")
        state[entry["name"]] = arr
    return state, manifest


def prefixed(state: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v for k, v in state.items()}


def strip_prefix(state: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    head = prefix + "/"
    return {k[len(head):]: v for k, v in state.items() if k.startswith(head)}
