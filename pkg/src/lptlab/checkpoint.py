"""Binary checkpoint format.

Layout (little-endian): magic ``LPT1``; u32 tensor count; then per tensor
a header record (u32 name length, UTF-8 name, u32 rank, u64 dims, u8 dtype
tag); then the raw payloads contiguously in header order. Round-trips are
bitwise: load(save(x)) == x exactly.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from .errors import DataFormatError

MAGIC = b"LPT1"
_TAG_FOR_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPE_FOR_TAG = {0: np.dtype(np.float32), 1: np.dtype(np.float64)}


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    if len(set(tensors)) != len(tensors):
        raise DataFormatError("duplicate tensor names")
    header = [MAGIC, struct.pack("<I", len(tensors))]
    payloads = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _TAG_FOR_DTYPE:
            raise DataFormatError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        header.append(struct.pack("<I", len(nb)))
        header.append(nb)
        header.append(struct.pack("<I", arr.ndim))
        header.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        header.append(struct.pack("<B", _TAG_FOR_DTYPE[arr.dtype]))
        payloads.append(arr.tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(b"".join(header))
        for p in payloads:
            fh.write(p)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise DataFormatError(f"{self.path}: truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    if r.take(4) != MAGIC:
        raise DataFormatError(f"{path}: bad magic; not a checkpoint file")
    count = r.u32()
    records = []
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        tag = r.u8()
        if tag not in _DTYPE_FOR_TAG:
            raise DataFormatError(f"{path}: unknown dtype tag {tag} for {name!r}")
        records.append((name, dims, _DTYPE_FOR_TAG[tag]))
    if len({name for name, _, _ in records}) != len(records):
        raise DataFormatError(f"{path}: duplicate tensor names")
    out = {}
    for name, dims, dtype in records:
        n_items = 1
        for d in dims:
            n_items *= d
        raw = r.take(n_items * dtype.itemsize)
        out[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
    if r.pos != len(r.buf):
        raise DataFormatError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    return out


def weights_fingerprint(tensors: dict[str, np.ndarray]) -> str:
    """Order-independent content hash, for frozen-weight assertions."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        h.update(name.encode("utf-8"))
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes(order="C"))
    return h.hexdigest()
