"""Binary helpers shared by the checkpoint and teacher-cache formats."""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from pathlib import Path

import numba
import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


@numba.njit(cache=True)
def _fnv1a64_kernel(data):
    h = np.uint64(0xCBF29CE484222325)
    prime = np.uint64(0x100000001B3)
    for i in range(data.shape[0]):
        h ^= np.uint64(data[i])
        h *= prime
    return h


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash of ``data``."""
    if not data:
        return FNV_OFFSET
    return int(_fnv1a64_kernel(np.frombuffer(data, dtype=np.uint8)))


def fnv1a64_reference(data: bytes) -> int:
    # Pure-python path; slow, used to cross-check the compiled kernel.
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def seal(payload: bytes) -> bytes:
    """Append the little-endian FNV-1a checksum of ``payload``."""
    return payload + struct.pack("<Q", fnv1a64(payload))


def unseal(blob: bytes, what: str = "file") -> bytes:
    """Verify and strip the trailing checksum."""
    if len(blob) < 8:
        raise ValueError(f"{what} is truncated ({len(blob)} bytes)")
    payload, tail = blob[:-8], blob[-8:]
    (stored,) = struct.unpack("<Q", tail)
    actual = fnv1a64(payload)
    if stored != actual:
        raise ValueError(f"{what} checksum mismatch: stored {stored:#018x}, computed {actual:#018x}")
    return payload


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write via temp file + rename so readers never see a partial file."""
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


def file_sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Reader:
    """Little-endian cursor over a byte buffer."""

    def __init__(self, buf: bytes, what: str = "file"):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ValueError(f"{self.what} ends unexpectedly at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f32(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").copy()

    def u32s(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<u4").astype(np.int64)

    @property
    def exhausted(self) -> bool:
        return self.pos == len(self.buf)
