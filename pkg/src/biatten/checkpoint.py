"""Flat binary parameter container.

Layout (all integers little-endian)::

    b"BIAT" | version:u32 | record*
    record := name_len:u32 | name:utf-8 | rank:u32 | extent:u64 * rank | payload:f32le * prod(extents)

Records run until end of file and are written in sorted name order, so the
same parameters always produce the same bytes.
"""

from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"BIAT"
VERSION = 1


class CheckpointError(Exception):
    """The file is not a readable checkpoint of the supported version."""


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def loads(blob: bytes) -> dict:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise CheckpointError("bad magic: not a BIAT checkpoint")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 8
    out: dict = {}
    try:
        while pos < len(blob):
            (name_len,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + name_len].decode("utf-8")
            if len(name.encode("utf-8")) != name_len:
                raise CheckpointError("truncated parameter name")
            pos += name_len
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            count = int(np.prod(shape, dtype=np.int64))
            end = pos + 4 * count
            if end > len(blob):
                raise CheckpointError(f"truncated payload for {name!r}")
            out[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).astype(np.float32).reshape(shape)
            pos = end
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    return out


def save(path: str | os.PathLike, arrays: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(arrays))


def load(path: str | os.PathLike) -> dict:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(blob)
