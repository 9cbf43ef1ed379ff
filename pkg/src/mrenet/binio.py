"""Little-endian binary readers/writers shared by the file formats."""

from __future__ import annotations

import numpy as np


class FormatError(ValueError):
    """A binary file failed to parse (bad magic, truncation, bad field)."""


class Reader:
    """Sequential reader over a bytes buffer that reports offsets on failure."""

    def __init__(self, buf: bytes, label: str = "file"):
        self.buf = buf
        self.pos = 0
        self.label = label

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"{self.label}: truncated at offset {self.pos} "
                f"(needed {n} bytes, {len(self.buf) - self.pos} left)"
            )
        out = self.buf[self.pos: self.pos + n]
        self.pos += n
        return out

    def expect_magic(self, magic: bytes):
        got = self.take(len(magic))
        if got != magic:
            raise FormatError(
                f"{self.label}: bad magic at offset 0: expected {magic!r}, got {got!r}"
            )

    def u32(self) -> int:
        return int(np.frombuffer(self.take(4), dtype="<u4")[0])

    def u64(self) -> int:
        return int(np.frombuffer(self.take(8), dtype="<u8")[0])

    def f32(self) -> float:
        return float(np.frombuffer(self.take(4), dtype="<f4")[0])

    def array(self, dtype: str, count: int) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(itemsize * count), dtype=dtype).copy()

    def done(self):
        if self.pos != len(self.buf):
            raise FormatError(
                f"{self.label}: {len(self.buf) - self.pos} unexpected trailing "
                f"bytes at offset {self.pos}"
            )


class Writer:
    """Accumulates little-endian fields into a bytes payload."""

    def __init__(self):
        self.parts: list[bytes] = []

    def raw(self, b: bytes):
        self.parts.append(b)

    def u32(self, v: int):
        self.parts.append(np.uint32(v).astype("<u4").tobytes())

    def u64(self, v: int):
        self.parts.append(np.uint64(v).astype("<u8").tobytes())

    def f32(self, v: float):
        self.parts.append(np.float32(v).astype("<f4").tobytes())

    def array(self, arr: np.ndarray, dtype: str):
        self.parts.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self.parts)
