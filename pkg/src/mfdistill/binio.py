"""Bounds-checked little-endian binary readers shared by the file formats.

Every read validates remaining length first, so truncated or corrupted
files always surface as FormatError with the failing byte offset, never
as an interpreter-level crash.
"""

from __future__ import annotations

import struct

import numpy as np


class FormatError(Exception):
    """Structured parse failure; carries the byte offset of the problem."""

    def __init__(self, offset: int, message: str):
        self.offset = offset
        super().__init__(f"at byte {offset}: {message}")


class Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def remaining(self) -> int:
        return len(self.data) - self.offset

    def take(self, n: int, what: str) -> bytes:
        if n < 0:
            raise FormatError(self.offset, f"negative length for {what}")
        if self.remaining() < n:
            raise FormatError(
                self.offset,
                f"need {n} bytes for {what}, only {self.remaining()} left",
            )
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def f32s(self, n: int, what: str) -> np.ndarray:
        raw = self.take(4 * n, what)
        return np.frombuffer(raw, dtype="<f4", count=n).astype(np.float32)

    def f64s(self, n: int, what: str) -> np.ndarray:
        raw = self.take(8 * n, what)
        return np.frombuffer(raw, dtype="<f8", count=n).copy()

    def expect_magic(self, magic: bytes, what: str):
        start = self.offset
        got = self.take(len(magic), f"{what} magic")
        if got != magic:
            raise FormatError(start, f"bad {what} magic {got!r}, expected {magic!r}")

    def expect_eof(self, what: str):
        if self.remaining() != 0:
            raise FormatError(self.offset,
                              f"{self.remaining()} trailing bytes after {what}")


def pack_u16(v: int) -> bytes:
    return struct.pack("<H", v)


def pack_u32(v: int) -> bytes:
    return struct.pack("<I", v)


def pack_u64(v: int) -> bytes:
    return struct.pack("<Q", v)


def pack_f32s(a) -> bytes:
    return np.asarray(a, dtype="<f4").tobytes()


def pack_f64s(a) -> bytes:
    return np.asarray(a, dtype="<f8").tobytes()
