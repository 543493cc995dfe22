"""GTNS binary tensor files and name->file parameter manifests.

Layout: ``b"GTNS"``, u8 version (1), u8 dtype (0 = f32, 1 = f64), u8 rank,
rank × u32 little-endian dims, then the row-major little-endian payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"GTNS"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def encode(arr) -> bytes:
    arr = np.asarray(arr)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise TypeError(f"GTNS stores float32/float64 only, got {arr.dtype}")
    head = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise ValueError("not a GTNS file (bad magic)")
    version, code, rank = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise ValueError(f"unsupported GTNS version {version}")
    if code not in _DTYPES:
        raise ValueError(f"unknown GTNS dtype code {code}")
    dims = struct.unpack_from(f"<{rank}I", buf, 7)
    off = 7 + 4 * rank
    dt = _DTYPES[code]
    n = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = buf[off : off + n * dt.itemsize]
    if len(payload) != n * dt.itemsize or len(buf) != off + n * dt.itemsize:
        raise ValueError("GTNS payload size does not match its header")
    return np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))


def save(path, arr):
    Path(path).write_bytes(encode(arr))


def load(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def save_arrays(directory, arrays, manifest_name="params.manifest"):
    """Write each array to ``<dir>/tensors/<i>.gtns`` and a ``name<TAB>file`` manifest."""
    directory = Path(directory)
    (directory / "tensors").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, name in enumerate(sorted(arrays)):
        rel = f"tensors/{i:04d}.gtns"
        save(directory / rel, arrays[name])
        lines.append(f"{name}\t{rel}")
    (directory / manifest_name).write_text("\n".join(lines) + "\n")


def load_arrays(directory, manifest_name="params.manifest"):
    directory = Path(directory)
    out = {}
    for line in (directory / manifest_name).read_text().splitlines():
        if not line.strip():
            continue
        name, rel = line.split("\t")
        out[name] = load(directory / rel)
    return out
