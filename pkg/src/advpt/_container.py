"""Little-endian binary container helpers shared by the bank, context and
checkpoint formats.

Every file is ``MAGIC(8) | version:u32 | body | sha256(prefix)`` where the
trailing digest covers every preceding byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptionError, FormatError

DIGEST_SIZE = 32


class Writer:
    def __init__(self, magic: bytes, version: int):
        assert len(magic) == 8
        self._parts: list[bytes] = [magic, struct.pack("<I", version)]

    def pack(self, fmt: str, *values) -> None:
        self._parts.append(struct.pack("<" + fmt, *values))

    def raw(self, data: bytes) -> None:
        self._parts.append(data)

    def array(self, arr: np.ndarray, dtype: str) -> None:
        a = np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<"))
        self._parts.append(a.tobytes(order="C"))

    def string(self, s: str) -> None:
        b = s.encode("utf-8")
        self.pack("I", len(b))
        self._parts.append(b)

    def json(self, obj) -> None:
        self.string(json.dumps(obj, sort_keys=True, separators=(",", ":")))

    def getvalue(self) -> bytes:
        body = b"".join(self._parts)
        return body + hashlib.sha256(body).digest()

    def write(self, path: str | Path) -> None:
        write_atomic(path, self.getvalue())


def write_atomic(path: str | Path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


class Reader:
    """Validates magic, version and trailing digest before any field is parsed."""

    def __init__(self, data: bytes, magic: bytes, version: int, what: str):
        if len(data) < 12 + DIGEST_SIZE:
            raise CorruptionError(f"{what}: file too short ({len(data)} bytes)")
        if data[:8] != magic:
            raise FormatError(f"{what}: bad magic {data[:8]!r}")
        body, digest = data[:-DIGEST_SIZE], data[-DIGEST_SIZE:]
        if hashlib.sha256(body).digest() != digest:
            raise CorruptionError(f"{what}: checksum mismatch (truncated or modified file)")
        (found,) = struct.unpack_from("<I", data, 8)
        if found != version:
            raise FormatError(f"{what}: format version {found}, expected {version}")
        self._buf = memoryview(body)
        self._pos = 12
        self._what = what

    def _take(self, n: int) -> memoryview:
        if self._pos + n > len(self._buf):
            raise CorruptionError(f"{self._what}: unexpected end of data")
        out = self._buf[self._pos:self._pos + n]
        self._pos += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        vals = struct.unpack(fmt, self._take(struct.calcsize(fmt)))
        return vals[0] if len(vals) == 1 else vals

    def raw(self, n: int) -> bytes:
        return bytes(self._take(n))

    def array(self, shape: tuple[int, ...], dtype: str) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        return np.frombuffer(self._take(n), dtype=dt).reshape(shape).astype(np.dtype(dtype))

    def string(self) -> str:
        n = self.unpack("I")
        return bytes(self._take(n)).decode("utf-8")

    def json(self):
        return json.loads(self.string())

    def done(self) -> None:
        if self._pos != len(self._buf):
            raise CorruptionError(f"{self._what}: {len(self._buf) - self._pos} trailing bytes")


def read_file(path: str | Path, magic: bytes, version: int, what: str) -> Reader:
    return Reader(Path(path).read_bytes(), magic, version, what)
