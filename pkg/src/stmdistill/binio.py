"""Little-endian binary readers/writers shared by the on-disk formats.

Every format starts with a 4-byte magic and a u32 version.  Readers fail
loudly: wrong magic, unsupported version, or any short read raises a typed
error instead of returning garbage.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import BadMagicError, TruncatedFileError, VersionError


class Writer:
    def __init__(self, fh):
        self.fh = fh

    def magic(self, tag: bytes):
        assert len(tag) == 4
        self.fh.write(tag)

    def u8(self, v: int):
        self.fh.write(struct.pack("<B", v))

    def u32(self, v: int):
        self.fh.write(struct.pack("<I", v))

    def i32(self, v: int):
        self.fh.write(struct.pack("<i", v))

    def u64(self, v: int):
        self.fh.write(struct.pack("<Q", v))

    def f64(self, v: float):
        self.fh.write(struct.pack("<d", v))

    def array(self, a: np.ndarray, dtype):
        self.fh.write(np.ascontiguousarray(a, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())

    def kv_block(self, meta: dict):
        """Length-prefixed UTF-8 block of sorted key=value lines."""
        for k in meta:
            if "=" in k or "\n" in k:
                raise ValueError(f"metadata key {k!r} may not contain '=' or newline")
            if "\n" in str(meta[k]):
                raise ValueError(f"metadata value for {k!r} may not contain newline")
        blob = "\n".join(f"{k}={meta[k]}" for k in sorted(meta)).encode("utf-8")
        self.u32(len(blob))
        self.fh.write(blob)


class Reader:
    def __init__(self, fh, name: str = "file"):
        self.fh = fh
        self.name = name

    def exact(self, n: int) -> bytes:
        b = self.fh.read(n)
        if len(b) != n:
            raise TruncatedFileError(
                f"{self.name}: wanted {n} bytes, got {len(b)} (file truncated)")
        return b

    def magic(self, tag: bytes):
        got = self.exact(4)
        if got != tag:
            raise BadMagicError(f"{self.name}: magic {got!r} != expected {tag!r}")

    def version(self, supported: int) -> int:
        v = self.u32()
        if v != supported:
            raise VersionError(f"{self.name}: version {v} unsupported (want {supported})")
        return v

    def u8(self) -> int:
        return struct.unpack("<B", self.exact(1))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.exact(4))[0]

    def i32(self) -> int:
        return struct.unpack("<i", self.exact(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.exact(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.exact(8))[0]

    def array(self, count: int, dtype) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        raw = self.exact(count * dt.itemsize)
        return np.frombuffer(raw, dtype=dt).astype(np.dtype(dtype), copy=True)

    def kv_block(self) -> dict:
        n = self.u32()
        blob = self.exact(n).decode("utf-8")
        meta = {}
        for line in blob.splitlines():
            if not line:
                continue
            k, _, v = line.partition("=")
            meta[k] = v
        return meta

    def expect_eof(self):
        extra = self.fh.read(1)
        if extra:
            raise TruncatedFileError(f"{self.name}: trailing bytes after payload")
