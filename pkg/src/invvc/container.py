"""Binary tensor-table container shared by checkpoints, features and alignments.

Layout (all integers little-endian)::

    b"IVVC"                       magic
    u32 version                   currently 1
    u32 n, n bytes                UTF-8 JSON metadata
    u32 tensor count
    per tensor:
        u16 n, n bytes            UTF-8 name
        u8 rank, rank x u32       dims
        float32 row-major data

JSON is written with sorted keys and no whitespace so identical inputs give
identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"IVVC"
VERSION = 1


class ContainerError(Exception):
    """Base class for container format problems."""


class BadMagicError(ContainerError):
    pass


class UnsupportedVersionError(ContainerError):
    pass


class TruncatedFileError(ContainerError):
    pass


class IntegrityError(ContainerError):
    """Tensor table disagrees with its own header (count, names, trailing bytes)."""


class ShapeMismatchError(ContainerError):
    """Stored tensors do not match the shapes implied by the stored config."""


def encode(meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        if arr.ndim > 255:
            raise ValueError(f"tensor {name!r} has too many dimensions")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"file ends inside {what} at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    @property
    def at_end(self) -> bool:
        return self.pos == len(self.buf)


def decode(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    r = _Reader(buf)
    if len(buf) < 4:
        raise TruncatedFileError("file shorter than the magic number")
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported container version {version}")
    (n,) = r.unpack("<I", "config length")
    try:
        meta = json.loads(r.take(n, "config blob").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"config blob is not valid JSON: {exc}") from None
    (count,) = r.unpack("<I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        if r.at_end:
            raise IntegrityError(f"header declares {count} tensors but file holds {i}")
        (n,) = r.unpack("<H", "tensor name length")
        try:
            name = r.take(n, "tensor name").decode("utf-8")
        except UnicodeDecodeError:
            raise IntegrityError(f"tensor {i} has an undecodable name") from None
        if name in tensors:
            raise IntegrityError(f"duplicate tensor name {name!r}")
        (rank,) = r.unpack("<B", "tensor rank")
        dims = r.unpack(f"<{rank}I", "tensor dims")
        size = int(np.prod(dims, dtype=np.int64))
        raw = r.take(4 * size, f"data of tensor {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    if not r.at_end:
        raise IntegrityError(
            f"{len(buf) - r.pos} trailing bytes after the declared {count} tensors"
        )
    return meta, tensors


def save(path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(meta, tensors))


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())
