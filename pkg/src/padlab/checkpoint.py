"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    magic      8 bytes   b"PADLABCK"
    version    u32       currently 1
    count      u32       number of named arrays
    count x {
      name_len u16, name utf-8 bytes,
      ndim     u8,  dims ndim x u32
    }
    payload    float64 little-endian, arrays concatenated in header order,
               each in row-major order
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"PADLABCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save(path: str | Path, arrays: Mapping[str, np.ndarray]) -> None:
    header = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    payload = []
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        header.append(struct.pack("<H", len(raw)) + raw)
        header.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(header + payload))


def load(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    try:
        return _decode(buf)
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None


def _decode(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:8] != MAGIC:
        raise CheckpointError("not a padlab checkpoint")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 16
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        entries.append((name, shape))
    out = {}
    for name, shape in entries:
        n = int(np.prod(shape, dtype=np.int64))
        if pos + 8 * n > len(buf):
            raise CheckpointError(f"truncated payload for {name!r}")
        out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(buf):
        raise CheckpointError("trailing bytes after payload")
    return out
