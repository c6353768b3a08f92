"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"SRGE" | u32 format_version | 32-byte config digest | u32 block count
    per block: u32 name length | UTF-8 name | u8 dtype code | u32 rank
               | rank x u64 dims | row-major raw values
    trailer:   32-byte SHA-256 of every preceding byte

The trailer catches edits that leave the block structure intact; a short
file is caught while walking the blocks.
"""
import hashlib
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import FormatError, IntegrityError

MAGIC = b"SRGE"
FORMAT_VERSION = 1
DIGEST_SIZE = 32

DTYPE_CODES = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("<i8"): 3,
    np.dtype("u1"): 4,
}
CODE_DTYPES = {code: dt for dt, code in DTYPE_CODES.items()}


@dataclass
class Checkpoint:
    epoch: int
    config_digest: bytes
    blocks: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    @property
    def config_digest_hex(self):
        return self.config_digest.hex()


def _as_storable(arr):
    arr = np.asarray(arr)
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in ("|",) else arr.dtype
    if dt not in DTYPE_CODES:
        if np.issubdtype(arr.dtype, np.integer):
            dt = np.dtype("<i8")
        else:
            raise FormatError(f"unsupported dtype {arr.dtype}")
    return np.asarray(arr, dtype=dt, order="C")


def to_bytes(ckpt):
    if len(ckpt.config_digest) != DIGEST_SIZE:
        raise FormatError(f"config digest must be {DIGEST_SIZE} bytes")
    parts = [MAGIC, struct.pack("<I", ckpt.format_version), ckpt.config_digest,
             struct.pack("<I", len(ckpt.blocks))]
    for name, value in ckpt.blocks.items():
        arr = _as_storable(value)
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BI", DTYPE_CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise IntegrityError(
                f"checkpoint truncated while reading {what}: need {n} bytes at offset {self.pos}, "
                f"file has {len(self.data)}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def from_bytes(data):
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("not a checkpoint file (bad magic bytes)")
    (version,) = r.unpack("<I", "format version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version: expected {FORMAT_VERSION}, got {version}")
    digest = r.take(DIGEST_SIZE, "config digest")
    (count,) = r.unpack("<I", "block count")
    blocks = {}
    for i in range(count):
        (name_len,) = r.unpack("<I", f"block {i} name length")
        name = r.take(name_len, f"block {i} name").decode("utf-8", errors="strict")
        code, rank = r.unpack("<BI", f"block {name!r} header")
        if code not in CODE_DTYPES:
            raise IntegrityError(f"block {name!r} has unknown dtype code {code}")
        dims = r.unpack(f"<{rank}Q", f"block {name!r} dims")
        dtype = CODE_DTYPES[code]
        n_bytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        raw = r.take(n_bytes, f"block {name!r} values")
        blocks[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
    body_end = r.pos
    trailer = r.take(DIGEST_SIZE, "content digest")
    if r.pos != len(data):
        raise IntegrityError(f"{len(data) - r.pos} unexpected trailing bytes after checkpoint")
    if hashlib.sha256(data[:body_end]).digest() != trailer:
        raise IntegrityError("checkpoint content digest mismatch (file was modified or corrupted)")
    epoch = int(blocks["meta/epoch"].reshape(())) if "meta/epoch" in blocks else 0
    return Checkpoint(epoch=epoch, config_digest=digest, blocks=blocks, format_version=version)


def save_checkpoint(ckpt, path):
    """Write ``ckpt`` atomically (temporary file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blocks = dict(ckpt.blocks)
    blocks["meta/epoch"] = np.asarray(ckpt.epoch, dtype=np.int64)
    payload = to_bytes(Checkpoint(ckpt.epoch, ckpt.config_digest, blocks, ckpt.format_version))
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return from_bytes(path.read_bytes())
