"""Versioned binary checkpoint container with bit-exact round trips.

Layout (all integers little-endian):
    bytes 0..7   magic ``RRIDCKPT``
    u32          version (currently 1)
    u64          epoch
    u32          byte length of the UTF-8 config snapshot, then the bytes
    u32          number of arrays, then per array:
                   u32 name length, UTF-8 name,
                   u32 dtype-string length, numpy dtype string (e.g. ``<f4``),
                   u32 ndim, u64 per dimension,
                   u64 payload byte length, raw C-order bytes
Array order is preserved, so save(load(x)) == x byte for byte.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"RRIDCKPT"
VERSION = 1


class CheckpointError(ValueError):
    """Bad magic, unsupported version, or truncated container."""


@dataclass
class CheckpointData:
    arrays: dict[str, np.ndarray]
    config_text: str
    epoch: int


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], config_text: str, epoch: int) -> None:
    chunks: list[bytes] = [MAGIC, struct.pack("<IQ", VERSION, epoch)]
    cfg = config_text.encode("utf-8")
    chunks.append(struct.pack("<I", len(cfg)))
    chunks.append(cfg)
    chunks.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        name_b = name.encode("utf-8")
        dtype_b = arr.dtype.str.encode("ascii")
        payload = arr.tobytes(order="C")
        chunks.append(struct.pack("<I", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<I", len(dtype_b)))
        chunks.append(dtype_b)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        chunks.append(struct.pack("<Q", len(payload)))
        chunks.append(payload)
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise CheckpointError(f"truncated checkpoint: {self.path}")
        out = self.blob[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str | Path) -> CheckpointData:
    blob = Path(path).read_bytes()
    r = _Reader(blob, path)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"not a checkpoint file: {path}")
    version, epoch = r.unpack("<IQ")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (cfg_len,) = r.unpack("<I")
    config_text = r.take(cfg_len).decode("utf-8")
    (count,) = r.unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        (dtype_len,) = r.unpack("<I")
        dtype = np.dtype(r.take(dtype_len).decode("ascii"))
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        (nbytes,) = r.unpack("<Q")
        arr = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(shape).copy()
        arrays[name] = arr
    return CheckpointData(arrays, config_text, int(epoch))
