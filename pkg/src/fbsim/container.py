"""FBSIM1 binary framing shared by dataset files and checkpoints.

All integers are little-endian u64 unless noted; floats are little-endian
float64.  Checkpoints carry the tag ``CKPT`` right after the magic string.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import ContainerError
from .nn import KINDS, ParamVector, Segment

MAGIC = b"FBSIM1"
CHECKPOINT_TAG = b"CKPT"


class Writer:
    def __init__(self):
        self._parts: list[bytes] = []

    def raw(self, data: bytes) -> None:
        self._parts.append(bytes(data))

    def u64(self, value: int) -> None:
        self._parts.append(struct.pack("<Q", int(value)))

    def u8(self, value: int) -> None:
        self._parts.append(struct.pack("<B", int(value)))

    def f64(self, array: np.ndarray) -> None:
        self._parts.append(np.ascontiguousarray(array, dtype="<f8").tobytes())

    def text(self, value: str) -> None:
        data = value.encode("utf-8")
        self.u64(len(data))
        self.raw(data)

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes, source: str = "<bytes>"):
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise ContainerError(
                f"{self.source}: truncated while reading {what} at offset {self.pos} "
                f"(need {n} bytes, {len(self.data) - self.pos} left)"
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def f64(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(8 * count, what), dtype="<f8").astype(np.float64)

    def text(self, what: str) -> str:
        return self.take(self.u64(f"{what} length"), what).decode("utf-8")

    def expect_end(self) -> None:
        if self.pos != len(self.data):
            raise ContainerError(f"{self.source}: {len(self.data) - self.pos} trailing bytes at offset {self.pos}")


def read_magic(reader: Reader) -> None:
    head = reader.take(len(MAGIC), "magic")
    if head == MAGIC:
        return
    if head[:5] == MAGIC[:5]:
        raise ContainerError(
            f"{reader.source}: container version {head[5:].decode('ascii', 'replace')!r} "
            f"is not supported (expected {MAGIC[5:].decode()!r}) at offset 0"
        )
    raise ContainerError(f"{reader.source}: bad magic {head!r} at offset 0 (expected {MAGIC!r})")


def write_param_vector(w: Writer, name: str, pv: ParamVector) -> None:
    w.text(name)
    w.u64(len(pv.segments))
    for seg in pv.segments:
        w.text(seg.name)
        w.u64(seg.offset)
        w.u64(seg.length)
        w.u8(KINDS.index(seg.kind))
        w.u64(len(seg.shape))
        for dim in seg.shape:
            w.u64(dim)
    w.u64(len(pv))
    w.f64(pv.values)


def read_param_vector(r: Reader) -> tuple[str, ParamVector]:
    name = r.text("vector name")
    segments = []
    for _ in range(r.u64("segment count")):
        seg_name = r.text("segment name")
        offset = r.u64("segment offset")
        length = r.u64("segment length")
        kind_at = r.pos
        kind = r.u8("segment kind")
        if kind >= len(KINDS):
            raise ContainerError(f"{r.source}: unknown segment kind {kind} at offset {kind_at}")
        shape = tuple(r.u64("segment dim") for _ in range(r.u64("segment ndim")))
        segments.append(Segment(seg_name, offset, length, KINDS[kind], shape))
    values = r.f64(r.u64("vector length"), f"values of {name!r}")
    return name, ParamVector(values, tuple(segments))


def atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def save_checkpoint(path: Path, vectors: dict[str, ParamVector], meta: dict | None = None) -> None:
    """Write named ParamVectors (plus JSON metadata) in FBSIM1 framing."""
    w = Writer()
    w.raw(MAGIC)
    w.raw(CHECKPOINT_TAG)
    w.text(json.dumps(meta or {}, sort_keys=True))
    w.u64(len(vectors))
    for name, pv in vectors.items():
        write_param_vector(w, name, pv)
    atomic_write(path, w.getvalue())


def load_checkpoint(path: Path) -> tuple[dict[str, ParamVector], dict]:
    path = Path(path)
    r = Reader(path.read_bytes(), str(path))
    read_magic(r)
    tag = r.take(len(CHECKPOINT_TAG), "checkpoint tag")
    if tag != CHECKPOINT_TAG:
        raise ContainerError(f"{path}: not a checkpoint (tag {tag!r} at offset {len(MAGIC)})")
    meta = json.loads(r.text("metadata"))
    vectors = dict(read_param_vector(r) for _ in range(r.u64("vector count")))
    r.expect_end()
    return vectors, meta
