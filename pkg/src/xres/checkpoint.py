"""Checkpoint container: named arrays, little-endian, CRC-protected.

Layout: magic "XRESCKPT", u32 version, u32 record count, then per record
u16 name length + UTF-8 name, u8 dtype tag (0 = float32, 1 = float64),
u8 rank, u32 extents, raw values; a CRC32 over everything preceding closes
the file. All integers little-endian.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

__all__ = ["save_entries", "load_entries", "CheckpointError", "MAGIC", "VERSION"]

MAGIC = b"XRESCKPT"
VERSION = 1

_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR_KIND = {"f4": 0, "f8": 1}


class CheckpointError(Exception):
    pass


def save_entries(path, entries: dict) -> None:
    """Write {name: float ndarray} preserving order."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        key = arr.dtype.str.lstrip("<>=|")
        if key not in _TAG_FOR_KIND:
            raise CheckpointError(f"entry {name}: unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise CheckpointError(f"entry name too long: {name[:40]}...")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<BB", _TAG_FOR_KIND[key], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=f"<{key}").tobytes())
    body = b"".join(chunks)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", crc))


class _Reader:
    def __init__(self, blob: bytes, what: str):
        self.blob = blob
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(
                f"{self.what}: truncated, wanted {self.pos + n} bytes, have {len(self.blob)}"
            )
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out


def load_entries(path) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 12:
        raise CheckpointError(f"{path}: too short ({len(blob)} bytes) to be a checkpoint")
    body, crc_stored = blob[:-4], struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise CheckpointError(f"{path}: CRC mismatch, file corrupt")
    r = _Reader(body, str(path))
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    version, count = struct.unpack("<II", r.take(8))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}, expected {VERSION}")
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", r.take(2))
        name = r.take(nlen).decode("utf-8")
        tag, rank = struct.unpack("<BB", r.take(2))
        if tag not in _DTYPE_TAGS:
            raise CheckpointError(f"{path}: entry {name}: unknown dtype tag {tag}")
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        dtype = _DTYPE_TAGS[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        data = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(shape).copy()
        entries[name] = data
    if r.pos != len(body):
        raise CheckpointError(f"{path}: {len(body) - r.pos} trailing bytes after last record")
    return entries
