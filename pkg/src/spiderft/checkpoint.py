"""Binary tensor checkpoints with a trailing integrity checksum.

Layout, all integers little-endian:

    magic   8 bytes  b"SPIDRCK1"
    count   u64
    tensor  (name_len u64, name utf-8, rank u64, dims u64 x rank,
             payload f32 x prod(dims))     -- repeated `count` times
    crc32   u32      zlib.crc32 of every preceding byte

Values are computed in 64-bit and stored in 32-bit, so a save/load round
trip lands within one 32-bit ULP of the original. A reload of a saved
file re-serializes byte-identically.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CorruptCheckpointError, FormatError
from .tensors import FlatTensor, TensorMap

MAGIC = b"SPIDRCK1"
_MAX_RANK = 32


def save_checkpoint(tm: TensorMap, path: str | Path) -> None:
    chunks = [MAGIC, struct.pack("<Q", len(tm))]
    for t in tm:
        with np.errstate(over="ignore"):
            payload = t.data.astype("<f4")
        if t.data.size and not np.all(np.isfinite(payload)):
            raise FormatError(f"{t.name}: value out of 32-bit float range")
        name = t.name.encode("utf-8")
        chunks.append(struct.pack("<Q", len(name)))
        chunks.append(name)
        chunks.append(struct.pack("<Q", len(t.shape)))
        chunks.append(struct.pack(f"<{len(t.shape)}Q", *t.shape))
        chunks.append(payload.tobytes())
    body = b"".join(chunks)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


class _Cursor:
    def __init__(self, body: bytes):
        self.body = body
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.body):
            raise FormatError("checkpoint truncated")
        out = self.body[self.pos : self.pos + n]
        self.pos += n
        return out

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    @property
    def exhausted(self) -> bool:
        return self.pos == len(self.body)


def load_checkpoint(path: str | Path) -> TensorMap:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8 + 4:
        raise FormatError("file too short to be a checkpoint")
    if raw[: len(MAGIC)] != MAGIC:
        raise FormatError("bad magic, not a checkpoint file")

    body, crc_bytes = raw[:-4], raw[-4:]
    if struct.unpack("<I", crc_bytes)[0] != zlib.crc32(body):
        raise CorruptCheckpointError(f"{path}: checksum mismatch")

    cur = _Cursor(body)
    cur.take(len(MAGIC))
    count = cur.u64()
    tm = TensorMap()
    for _ in range(count):
        name_len = cur.u64()
        try:
            name = cur.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"tensor name is not valid utf-8: {exc}") from exc
        rank = cur.u64()
        if rank > _MAX_RANK:
            raise FormatError(f"{name}: implausible rank {rank}")
        dims = tuple(cur.u64() for _ in range(rank))
        size = 1
        for d in dims:
            size *= d
        payload = np.frombuffer(cur.take(4 * size), dtype="<f4").astype(np.float64)
        try:
            tensor = FlatTensor(name=name, shape=dims, data=payload)
        except (ValueError, TypeError) as exc:
            raise FormatError(f"{name}: {exc}") from exc
        if name in tm:
            raise FormatError(f"duplicate tensor name {name!r}")
        tm.add(tensor)
    if not cur.exhausted:
        raise FormatError("trailing bytes after tensor table")
    return tm
