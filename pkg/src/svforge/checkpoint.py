"""Binary checkpoint format shared by every stage.

Layout (little-endian)::

    b"SVFORGE1"
    u32 tensor count
    per tensor: u16 name length, UTF-8 name, u8 rank, u32 dims[rank],
                u8 dtype (0=f32, 1=f64), raw data (row-major)

Reserved name prefixes: ``enc.`` encoder, ``lora.`` LoRA factors, ``head.``
embedding head, ``gate.`` pruning gates.
"""

from __future__ import annotations

import hashlib
import io
import struct

import numpy as np

MAGIC = b"SVFORGE1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def dumps(tensors: dict[str, np.ndarray], dtype: str = "f64") -> bytes:
    """Serialise in sorted-name order. ``dtype="f32"`` stores 32-bit copies."""
    code = {"f32": 0, "f64": 1}[dtype]
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        # asarray keeps 0-d tensors 0-d (ascontiguousarray promotes them)
        arr = np.asarray(tensors[name], dtype=_DTYPES[code], order="C")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointError(f"tensor {name!r} cannot be encoded")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(struct.pack("<B", code))
        buf.write(arr.tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:8] != MAGIC:
        raise CheckpointError("bad magic; not an SVFORGE1 checkpoint")
    pos = 8
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        (code,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name!r}")
        dt = _DTYPES[code]
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(blob, dtype=dt, count=n, offset=pos).reshape(dims)
        pos += n * dt.itemsize
        out[name] = arr.astype(np.float64)
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last tensor")
    return out


def save_checkpoint(path: str, tensors: dict[str, np.ndarray], dtype: str = "f64"):
    with open(path, "wb") as f:
        f.write(dumps(tensors, dtype))


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return loads(f.read())


def checksum(tensors: dict[str, np.ndarray]) -> str:
    return hashlib.sha256(dumps(tensors)).hexdigest()


def with_prefix(tensors: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {k: v for k, v in tensors.items() if k.startswith(prefix)}
