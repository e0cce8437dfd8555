"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"LIFI"                     magic
    u32   version               currently 1
    u32   config length, then that many bytes of UTF-8 JSON (model config block)
    u32   tensor count
    per tensor:
        u16 name length, name bytes (UTF-8)
        u8  ndim, then ndim x u32 dims
        u64 payload byte length
    payloads, in directory order, as float32 little-endian
    32-byte SHA-256 of everything above

Tensor names follow ``base/...``, ``adapter/{k}/{l}/{site}/{w_down|w_up}``,
``fusion/{l}/{site}/tau`` and ``classifier/...``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"LIFI"
VERSION = 1
_DIGEST = 32


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ChecksumMismatchError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: dict = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = VERSION


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    header = bytearray(MAGIC)
    header += struct.pack("<I", ckpt.version)
    cfg = json.dumps(ckpt.config, sort_keys=True).encode()
    header += struct.pack("<I", len(cfg)) + cfg
    header += struct.pack("<I", len(ckpt.tensors))
    payloads = []
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"tensor {name!r} has non-finite values")
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        nb = name.encode()
        header += struct.pack("<H", len(nb)) + nb
        header += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        header += struct.pack("<Q", len(raw))
        payloads.append(raw)
    body = bytes(header) + b"".join(payloads)
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, buf: bytes, end: int):
        self.buf, self.pos, self.end = buf, 0, end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise TruncatedCheckpointError(f"checkpoint truncated: need {n} bytes at offset {self.pos}, "
                                           f"only {self.end - self.pos} left")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < 4 or buf[:4] != MAGIC:
        if len(buf) < 4 and MAGIC.startswith(buf):
            raise TruncatedCheckpointError("checkpoint truncated inside the magic string")
        raise BadMagicError("not a LIFI checkpoint (bad magic)")
    r = _Reader(buf, max(len(buf) - _DIGEST, 0))
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint format version {version} is not supported (expected {VERSION})")
    (cfg_len,) = r.unpack("<I")
    try:
        config = json.loads(r.take(cfg_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt config block ({e})") from None
    (count,) = r.unpack("<I")
    directory = []
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        try:
            name = r.take(nlen).decode()
        except UnicodeDecodeError:
            raise CheckpointError("corrupt tensor name in directory") from None
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}I") if ndim else ()
        (nbytes,) = r.unpack("<Q")
        expected = 4 * int(np.prod(dims, dtype=np.int64))
        if nbytes != expected:
            raise CheckpointError(f"tensor {name!r}: payload length {nbytes} does not match shape {dims}")
        directory.append((name, dims, nbytes))
    tensors = {}
    for name, dims, nbytes in directory:
        raw = r.take(nbytes)
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != r.end or len(buf) < r.end + _DIGEST:
        if len(buf) - r.pos < _DIGEST:
            raise TruncatedCheckpointError("checkpoint truncated: integrity checksum missing")
        raise CheckpointError(f"{r.end - r.pos} unexpected bytes after tensor payloads")
    digest = buf[r.end:r.end + _DIGEST]
    if hashlib.sha256(buf[:r.end]).digest() != digest:
        raise ChecksumMismatchError("checkpoint checksum mismatch (file corrupted)")
    return Checkpoint(config=config, tensors=tensors, version=version)


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], config: dict | None = None) -> Checkpoint:
    ckpt = Checkpoint(config=dict(config or {}), tensors={k: np.asarray(v) for k, v in tensors.items()})
    data = encode_checkpoint(ckpt)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return ckpt


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
