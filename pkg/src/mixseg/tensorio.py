"""Binary tensor file format (magic ``MXSG``) and the named-tensor checkpoint container.

Record layout, all little-endian:
magic ``MXSG`` | version u16 | dtype u8 (0 = float32, 1 = float64) | ndim u8 |
dims as u32 each | payload floats in C (row-major) order.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MXSG"
VERSION = 1

DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class TensorFormatError(ValueError):
    pass


def tensor_bytes(array: np.ndarray, dtype: str | None = None) -> bytes:
    """Serialize an array to one MXSG record. ``dtype`` forces f32/f64 on write."""
    array = np.asarray(array)
    if dtype is not None:
        array = array.astype(dtype)
    if array.dtype not in _CODE_FOR_KIND:
        array = array.astype(np.float64)
    code = _CODE_FOR_KIND[array.dtype]
    if array.ndim > 255:
        raise TensorFormatError("too many dimensions")
    header = MAGIC + struct.pack("<HBB", VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    payload = np.ascontiguousarray(array, dtype=DTYPE_CODES[code]).tobytes()
    return header + payload


def write_tensor(path: str | Path, array: np.ndarray, dtype: str | None = None) -> None:
    Path(path).write_bytes(tensor_bytes(array, dtype=dtype))


def read_tensor_from(stream: io.BufferedIOBase) -> np.ndarray:
    head = stream.read(8)
    if len(head) < 8:
        raise TensorFormatError("truncated tensor header")
    if head[:4] != MAGIC:
        raise TensorFormatError(f"bad magic {head[:4]!r}")
    version, code, ndim = struct.unpack("<HBB", head[4:8])
    if version != VERSION:
        raise TensorFormatError(f"unsupported tensor version {version}")
    if code not in DTYPE_CODES:
        raise TensorFormatError(f"unknown dtype code {code}")
    dims_raw = stream.read(4 * ndim)
    if len(dims_raw) < 4 * ndim:
        raise TensorFormatError("truncated dims")
    dims = struct.unpack(f"<{ndim}I", dims_raw)
    dtype = DTYPE_CODES[code]
    count = int(np.prod(dims)) if ndim else 1
    payload = stream.read(count * dtype.itemsize)
    if len(payload) < count * dtype.itemsize:
        raise TensorFormatError("truncated payload")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def read_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        array = read_tensor_from(f)
        if f.read(1):
            raise TensorFormatError("trailing bytes after tensor record")
    return array


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    return read_tensor_from(io.BytesIO(blob))


# Checkpoint container: a plain-text index (count plus one tensor name per line)
# followed by the MXSG records in index order.

CKPT_HEADER = b"MXSG-CKPT 1\n"


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(CKPT_HEADER)
        f.write(f"{len(tensors)}\n".encode())
        for name in tensors:
            if "\n" in name:
                raise TensorFormatError("tensor names must be single-line")
            f.write(name.encode() + b"\n")
        for array in tensors.values():
            f.write(tensor_bytes(array))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        if f.readline() != CKPT_HEADER:
            raise TensorFormatError("not a checkpoint file")
        count = int(f.readline().strip())
        names = [f.readline().strip().decode() for _ in range(count)]
        return {name: read_tensor_from(f) for name in names}
