"""
Checkpoint Container
====================

Self-describing little-endian binary file::

    magic        8 bytes   b"SHEDCKPT"
    version      uint32
    arch_len     uint32    + architecture JSON (utf-8)
    n_tensors    uint32
    per tensor:  ndim uint32, extents uint32 * ndim, float64 payload
    meta_len     uint32    + metadata JSON (utf-8)
    crc32        uint32    over every preceding byte

Parameters round-trip bit-exactly.  Anything malformed raises
``FormatError``; a different version raises ``IncompatibleVersionError``.
"""

from __future__ import annotations

import json
import math
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, List, Tuple, Union

import numpy as np
from pydantic import ValidationError

from errors import FormatError, IncompatibleVersionError, UsageError
from models import Architecture, CheckpointMeta

if TYPE_CHECKING:
    from network import Network

MAGIC = b"SHEDCKPT"
FORMAT_VERSION = 1

_U32 = struct.Struct("<I")


@dataclass
class Checkpoint:
    architecture: Architecture
    params: List[np.ndarray]
    meta: CheckpointMeta

    def to_network(self) -> "Network":
        from network import Network
        return Network.from_checkpoint(self)

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.architecture, [p.copy() for p in self.params], self.meta.model_copy())

    def param_index(self, layer: int) -> int:
        """Position of layer ``layer``'s weight in ``params`` (bias follows it)."""
        weighted = self.architecture.weighted_layers()
        if layer not in weighted:
            raise ValueError(f"layer {layer} holds no weights")
        return 2 * weighted.index(layer)


# ──────────────────────────────────────────────
# Low-level framing helpers (shared with the dataset container)
# ──────────────────────────────────────────────

class Reader:
    """Bounds-checked cursor over a byte buffer."""

    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise FormatError(f"{self.what}: truncated (wanted {n} bytes at offset {self.pos})")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def text(self) -> str:
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"{self.what}: invalid text block ({e})") from None

    def array(self, dtype: str, shape: Tuple[int, ...]) -> np.ndarray:
        count = math.prod(shape)
        itemsize = np.dtype(dtype).itemsize
        raw = self.take(count * itemsize)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{self.what}: {len(self.buf) - self.pos} trailing bytes")


def seal(body: bytes) -> bytes:
    return body + _U32.pack(zlib.crc32(body))


def unseal(buf: bytes, magic: bytes, version: int, what: str) -> Reader:
    """Check magic, checksum and version; return a reader positioned after the version."""
    if len(buf) < len(magic) + 8:
        raise FormatError(f"{what}: file too short ({len(buf)} bytes)")
    if buf[:len(magic)] != magic:
        raise FormatError(f"{what}: wrong magic bytes")
    body, (crc,) = buf[:-4], _U32.unpack(buf[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError(f"{what}: checksum mismatch (corrupt or truncated)")
    reader = Reader(body, what)
    reader.take(len(magic))
    found = reader.u32()
    if found != version:
        raise IncompatibleVersionError(f"{what}: format version {found} is not supported (expected {version})")
    return reader


def text_block(text: str) -> bytes:
    raw = text.encode("utf-8")
    return _U32.pack(len(raw)) + raw


def atomic_write_bytes(path: Union[str, Path], payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    try:
        tmp.write_bytes(payload)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


# ──────────────────────────────────────────────
# Checkpoint save / load
# ──────────────────────────────────────────────

def dump_checkpoint(checkpoint: Checkpoint) -> bytes:
    parts = [MAGIC, _U32.pack(FORMAT_VERSION), text_block(checkpoint.architecture.model_dump_json())]
    parts.append(_U32.pack(len(checkpoint.params)))
    for p in checkpoint.params:
        arr = np.ascontiguousarray(p, dtype="<f8")
        parts.append(_U32.pack(arr.ndim))
        parts.extend(_U32.pack(d) for d in arr.shape)
        parts.append(arr.tobytes())
    parts.append(text_block(checkpoint.meta.model_dump_json()))
    return seal(b"".join(parts))


def parse_checkpoint(buf: bytes) -> Checkpoint:
    reader = unseal(buf, MAGIC, FORMAT_VERSION, "checkpoint")
    try:
        architecture = Architecture.model_validate_json(reader.text())
        count = reader.u32()
        expected = 2 * len(architecture.weighted_layers())
        if count != expected:
            raise FormatError(f"checkpoint: {count} tensors, architecture needs {expected}")
        params = []
        for _ in range(count):
            ndim = reader.u32()
            if ndim > 4:
                raise FormatError(f"checkpoint: tensor rank {ndim} not supported")
            shape = tuple(reader.u32() for _ in range(ndim))
            params.append(reader.array("<f8", shape).astype(np.float64))
        meta = CheckpointMeta.model_validate_json(reader.text())
        reader.done()
    except (ValidationError, json.JSONDecodeError) as e:
        raise FormatError(f"checkpoint: invalid metadata ({e.__class__.__name__})") from None
    if not all(np.all(np.isfinite(p)) for p in params):
        raise FormatError("checkpoint: non-finite parameter values")
    checkpoint = Checkpoint(architecture, params, meta)
    try:
        checkpoint.to_network()
    except (ValueError, UsageError) as e:
        raise FormatError(f"checkpoint: tensors do not match architecture ({e})") from None
    return checkpoint


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> Path:
    atomic_write_bytes(path, dump_checkpoint(checkpoint))
    return Path(path)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
