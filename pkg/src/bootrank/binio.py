"""Little-endian binary readers/writers shared by the checkpoint formats.

Every format is: 5-byte magic, a fixed header, payload sections, then a
sha256 digest over everything before it. Loads verify the magic first and
the digest last, and fail loudly on truncation.
"""

from __future__ import annotations

import hashlib
import io
import struct

import numpy as np

from .errors import DataError


class Writer:
    def __init__(self) -> None:
        self._buf = io.BytesIO()

    def magic(self, tag: str) -> None:
        self._buf.write(tag.encode("ascii"))

    def u8(self, value: int) -> None:
        self._buf.write(struct.pack("<B", value))

    def u32(self, value: int) -> None:
        self._buf.write(struct.pack("<I", value))

    def u64(self, value: int) -> None:
        self._buf.write(struct.pack("<Q", value))

    def f64(self, value: float) -> None:
        self._buf.write(struct.pack("<d", value))

    def string(self, value: str) -> None:
        raw = value.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise DataError(f"string too long to serialize ({len(raw)} bytes)")
        self._buf.write(struct.pack("<H", len(raw)))
        self._buf.write(raw)

    def f32_array(self, array: np.ndarray) -> None:
        raw = np.ascontiguousarray(array, dtype="<f4").tobytes()
        self.u64(len(raw))
        self._buf.write(raw)

    def u32_array(self, array: np.ndarray) -> None:
        raw = np.ascontiguousarray(array, dtype="<u4").tobytes()
        self.u64(len(raw))
        self._buf.write(raw)

    def finish(self) -> bytes:
        body = self._buf.getvalue()
        return body + hashlib.sha256(body).digest()


class Reader:
    def __init__(self, data: bytes, expect_magic: str) -> None:
        if len(data) < 5 + 32:
            raise DataError("truncated file")
        body, digest = data[:-32], data[-32:]
        if body[:5] != expect_magic.encode("ascii"):
            raise DataError(
                f"bad magic: expected {expect_magic!r}, got {body[:5]!r}"
            )
        if hashlib.sha256(body).digest() != digest:
            raise DataError("checksum mismatch: file corrupt or truncated")
        self._buf = io.BytesIO(body)
        self._buf.seek(5)

    def _take(self, n: int) -> bytes:
        raw = self._buf.read(n)
        if len(raw) != n:
            raise DataError("truncated file")
        return raw

    def u8(self) -> int:
        return struct.unpack("<B", self._take(1))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self._take(8))[0]

    def string(self) -> str:
        n = struct.unpack("<H", self._take(2))[0]
        return self._take(n).decode("utf-8")

    def f32_array(self, shape: tuple[int, ...]) -> np.ndarray:
        raw = self._take(self.u64())
        return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()

    def u32_array(self) -> np.ndarray:
        raw = self._take(self.u64())
        return np.frombuffer(raw, dtype="<u4").copy()
