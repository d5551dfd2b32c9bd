"""Single-file binary container for named float32 arrays.

Layout, all little-endian:

    magic   4 bytes  b"VAEM"
    version u16      currently 1
    count   u32      number of entries
    entry   repeated count times:
        name_len u16, name utf-8 bytes
        dtype    u8   (0 = float32)
        ndim     u8
        dims     ndim x u64
        payload  row-major float32

Entries are written in sorted name order so equal contents produce
byte-identical files.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError

MAGIC = b"VAEM"
VERSION = 1
_DTYPE_F32 = 0


def pack_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(arrays)))
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f4")
        encoded = name.encode("utf-8")
        if not encoded:
            raise ParameterError("array names must be non-empty")
        if len(encoded) > 0xFFFF:
            raise ParameterError(f"array name too long: {name[:40]!r}...")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<BB", _DTYPE_F32, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def write_arrays(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(pack_arrays(arrays))


class _Reader:
    def __init__(self, data: bytes, context: str):
        self.data = data
        self.pos = 0
        self.context = context

    def read(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.context}: truncated (needed {n} bytes at offset {self.pos})")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))


def unpack_arrays(data: bytes, context: str = "array container") -> dict[str, np.ndarray]:
    r = _Reader(data, context)
    if r.read(4) != MAGIC:
        raise FormatError(f"{context}: bad magic, not an array container")
    version, count = r.unpack("<HI")
    if version != VERSION:
        raise FormatError(f"{context}: unsupported container version {version}")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.read(name_len).decode("utf-8")
        if name in arrays:
            raise FormatError(f"{context}: duplicate array name {name!r}")
        dtype_code, ndim = r.unpack("<BB")
        if dtype_code != _DTYPE_F32:
            raise FormatError(f"{context}: unknown dtype code {dtype_code} for {name!r}")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        payload = r.read(4 * size)
        arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    if r.pos != len(data):
        raise FormatError(f"{context}: {len(data) - r.pos} trailing bytes after last entry")
    return arrays


def read_arrays(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"{path}: array file does not exist")
    return unpack_arrays(path.read_bytes(), context=str(path))
