"""Binary tensor container used for checkpoints and dataset arrays.

Layout (little-endian throughout)::

    magic        6 bytes  b"CTRLU\\0"
    version      u32
    n_records    u32
    per record:
      name_len   u32
      name       utf-8 bytes
      dtype      u8       1 = float32, 2 = float64
      rank       u32
      dims       u64 * rank
      payload    IEEE-754 values, C order
    checksum     u64      first 8 bytes of BLAKE2b over all payload bytes

``load`` refuses files whose checksum, magic or version do not match.
"""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"CTRLU\0"
VERSION = 1
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
TAGS = {"float32": 1, "float64": 2}


class CheckpointError(ValueError):
    pass


def _checksum(payloads: list[bytes]) -> int:
    h = hashlib.blake2b(digest_size=8)
    for p in payloads:
        h.update(p)
    return struct.unpack("<Q", h.digest())[0]


def dumps(arrays: Mapping[str, np.ndarray], dtype: str = "float32") -> bytes:
    tag = TAGS[dtype]
    dt = DTYPES[tag]
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    payloads = []
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype=dt, order="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BI", tag, a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        payload = a.tobytes()
        payloads.append(payload)
        parts.append(payload)
    parts.append(struct.pack("<Q", _checksum(payloads)))
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:6] != MAGIC:
        raise CheckpointError("bad magic bytes")
    if len(buf) < 14:
        raise CheckpointError("truncated header")
    pos = 6
    version, count = struct.unpack_from("<II", buf, pos)
    pos += 8
    if version != VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    out: dict[str, np.ndarray] = {}
    payloads = []
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            tag, rank = struct.unpack_from("<BI", buf, pos)
            pos += 5
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            if tag not in DTYPES:
                raise CheckpointError(f"unknown dtype tag {tag} for {name!r}")
            dt = DTYPES[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            payload = buf[pos:pos + nbytes]
            if len(payload) != nbytes:
                raise CheckpointError("truncated payload")
            pos += nbytes
            payloads.append(payload)
            out[name] = np.frombuffer(payload, dtype=dt).reshape(dims).copy()
        (stored,) = struct.unpack_from("<Q", buf, pos)
    except struct.error as e:
        raise CheckpointError(f"truncated checkpoint: {e}") from None
    if pos + 8 != len(buf):
        raise CheckpointError("trailing bytes after checksum")
    if stored != _checksum(payloads):
        raise CheckpointError("checksum mismatch")
    return out


def save(path, arrays: Mapping[str, np.ndarray], dtype: str = "float32") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(arrays, dtype))
    tmp.replace(path)


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
