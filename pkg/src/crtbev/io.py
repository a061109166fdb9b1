"""On-disk formats.

Array file (camera features, depth maps, memory-bank grids)::

    bytes 0..3    magic b"CRTA"
    bytes 4..15   three little-endian uint32 dims (d0, d1, d2)
    payload       d0*d1*d2 little-endian float64, row-major

2-D arrays are stored with d0 = 1.

Weight bundle::

    magic b"CRTW", uint32 version, uint32 n_arrays
    per array: uint16 name_len, name (utf-8), uint8 ndim, ndim * uint32 dims
    payload: every array in table order, little-endian float64, row-major
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

ARRAY_MAGIC = b"CRTA"
BUNDLE_MAGIC = b"CRTW"
BUNDLE_VERSION = 1


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path: str | os.PathLike, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def sha256_file(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def encode_array(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f8")
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError("array files hold 2-D or 3-D arrays")
    return ARRAY_MAGIC + struct.pack("<3I", *arr.shape) + np.ascontiguousarray(arr).tobytes()


def decode_array(buf: bytes) -> np.ndarray:
    if buf[:4] != ARRAY_MAGIC:
        raise ValueError("not a CRTA array file")
    dims = struct.unpack("<3I", buf[4:16])
    n = dims[0] * dims[1] * dims[2]
    data = np.frombuffer(buf, dtype="<f8", count=n, offset=16)
    if len(buf) != 16 + 8 * n:
        raise ValueError("array file payload length does not match header")
    return data.reshape(dims).astype(float)


def save_array(path, arr: np.ndarray) -> None:
    atomic_write_bytes(path, encode_array(arr))


def load_array(path) -> np.ndarray:
    return decode_array(Path(path).read_bytes())


def encode_bundle(arrays: dict[str, np.ndarray]) -> bytes:
    header = [BUNDLE_MAGIC, struct.pack("<II", BUNDLE_VERSION, len(arrays))]
    payload = []
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        header.append(struct.pack("<H", len(raw)) + raw)
        header.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(header + payload)


def decode_bundle(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != BUNDLE_MAGIC:
        raise ValueError("not a CRTW weight bundle")
    version, n = struct.unpack("<II", buf[4:12])
    if version != BUNDLE_VERSION:
        raise ValueError(f"unsupported bundle version {version}")
    pos = 12
    table = []
    for _ in range(n):
        (name_len,) = struct.unpack("<H", buf[pos:pos + 2])
        pos += 2
        name = buf[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack("<B", buf[pos:pos + 1])
        pos += 1
        shape = struct.unpack(f"<{ndim}I", buf[pos:pos + 4 * ndim])
        pos += 4 * ndim
        table.append((name, shape))
    out = {}
    for name, shape in table:
        count = int(np.prod(shape)) if shape else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).astype(float)
        pos += 8 * count
    if pos != len(buf):
        raise ValueError("trailing bytes in weight bundle")
    return out


def save_bundle(path, arrays: dict[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode_bundle(arrays))


def load_bundle(path) -> dict[str, np.ndarray]:
    return decode_bundle(Path(path).read_bytes())
