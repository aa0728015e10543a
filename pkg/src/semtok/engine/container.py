"""Binary tensor container and checkpoint bundle files.

Single tensor ("LSTT"): magic, version u32, dtype code u8 (0=f32, 1=f64),
ndim u32, dims as u64 array, then the raw array data. All integers and data
are little-endian. Round-trips are bit-exact.

Bundle ("LSTB"): magic, version u32, entry count u32, then per entry a
u16 name length, the utf-8 name, and an embedded LSTT blob. Entries are
written sorted by name so equal contents give equal bytes.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC_TENSOR = b"LSTT"
MAGIC_BUNDLE = b"LSTB"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def write_tensor(buf: io.BufferedIOBase, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _CODE_FOR:
        raise ValueError(f"unsupported dtype {arr.dtype}; expected float32 or float64")
    code = _CODE_FOR[arr.dtype]
    buf.write(MAGIC_TENSOR)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<B", code))
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_tensor(buf: io.BufferedIOBase) -> np.ndarray:
    magic = buf.read(4)
    if magic != MAGIC_TENSOR:
        raise ValueError(f"bad tensor magic {magic!r}")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != VERSION:
        raise ValueError(f"unsupported tensor container version {version}")
    (code,) = struct.unpack("<B", buf.read(1))
    if code not in _DTYPE_CODES:
        raise ValueError(f"unknown dtype code {code}")
    (ndim,) = struct.unpack("<I", buf.read(4))
    dims = struct.unpack(f"<{ndim}Q", buf.read(8 * ndim))
    dtype = _DTYPE_CODES[code]
    n = int(np.prod(dims)) if ndim else 1
    raw = buf.read(n * dtype.itemsize)
    if len(raw) != n * dtype.itemsize:
        raise ValueError("truncated tensor data")
    return np.frombuffer(raw, dtype=dtype).reshape(dims).copy()


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor(f, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)


def save_bundle(path, tensors: dict[str, np.ndarray]) -> None:
    """Write a name -> tensor manifest. Keys are sorted for determinism."""
    with open(path, "wb") as f:
        f.write(MAGIC_BUNDLE)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise ValueError(f"entry name too long: {name[:40]}...")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            write_tensor(f, tensors[name])


def load_bundle(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint: {path}")
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC_BUNDLE:
            raise ValueError(f"bad bundle magic {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise ValueError(f"unsupported bundle version {version}")
        (count,) = struct.unpack("<I", f.read(4))
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            out[name] = read_tensor(f)
        return out
