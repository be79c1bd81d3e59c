"""Binary tensor container, dataset manifests and atomic file writes.

Container layout (all little-endian)::

    b"JCDP" | version u32 | dtype u8 | ndim u8 | shape u64 * ndim | payload

dtype codes: 0 float32, 1 uint8, 2 int64.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"JCDP"
VERSION = 1
MANIFEST_VERSION = 1

DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("u1"), 2: np.dtype("<i8")}
_CODE_OF = {np.dtype(v).newbyteorder("=").str: k for k, v in DTYPE_CODES.items()}
_CODE_OF.update({np.dtype(v).str: k for k, v in DTYPE_CODES.items()})


class ContainerError(ValueError):
    """A container or manifest failed validation."""

    def __init__(self, invariant: str, message: str):
        super().__init__(f"{invariant}: {message}")
        self.invariant = invariant


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    code = _CODE_OF.get(array.dtype.str)
    if code is None:
        raise ContainerError("dtype", f"unsupported dtype {array.dtype}")
    header = MAGIC + struct.pack("<IBB", VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    payload = np.ascontiguousarray(array, dtype=DTYPE_CODES[code]).tobytes(order="C")
    return header + payload


def decode_tensor(data: bytes) -> np.ndarray:
    if len(data) < 10 or data[:4] != MAGIC:
        raise ContainerError("magic", "missing JCDP magic bytes")
    version, code, ndim = struct.unpack_from("<IBB", data, 4)
    if version != VERSION:
        raise ContainerError("version", f"unknown container version {version}")
    if code not in DTYPE_CODES:
        raise ContainerError("dtype", f"unknown dtype code {code}")
    offset = 10
    if len(data) < offset + 8 * ndim:
        raise ContainerError("shape", "header truncated")
    shape = struct.unpack_from(f"<{ndim}Q", data, offset)
    offset += 8 * ndim
    dtype = DTYPE_CODES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    actual = len(data) - offset
    if actual != expected:
        raise ContainerError(
            "payload_length", f"payload has {actual} bytes, shape {shape} needs {expected}"
        )
    out = np.frombuffer(data, dtype=dtype, offset=offset).reshape(shape)
    return out.astype(dtype.newbyteorder("="), copy=True)


def write_tensor(path: str | os.PathLike, array: np.ndarray) -> None:
    atomic_write_bytes(path, encode_tensor(array))


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def sha256_file(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json(path: str | os.PathLike, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path: str | os.PathLike):
    return json.loads(Path(path).read_text())
