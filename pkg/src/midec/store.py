"""Binary checkpoint store for named float32 arrays plus a JSON config block.

Byte layout, all integers little-endian:

    magic   8 bytes, b"CMIVLD01"
    version u16 (currently 1)
    config  u32 byte length, then UTF-8 JSON
    arrays  zero or more records until end of file:
              u32 name byte length, name UTF-8 bytes,
              u32 rank, rank * u32 dims,
              prod(dims) * f32 values

Writes flush and fsync before returning, and loading what was saved
round-trips every array bit-exactly (signed zeros included).
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .errors import CorruptCheckpointError, InvalidInputError, UnsupportedFormatError

MAGIC = b"CMIVLD01"
VERSION = 1


def save(path: str | os.PathLike, config: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write ``config`` and named float32 arrays to ``path``."""
    try:
        config_bytes = json.dumps(config, sort_keys=True).encode("utf-8")
    except (TypeError, ValueError) as exc:
        raise InvalidInputError(f"config is not JSON-serializable: {exc}") from exc

    chunks = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(config_bytes)), config_bytes]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise InvalidInputError(f"array {name!r} must be float32, got {arr.dtype}")
        name_bytes = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))
        fh.flush()
        os.fsync(fh.fileno())


def load(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint back as ``(config, arrays)``."""
    with open(path, "rb") as fh:
        blob = fh.read()

    view = memoryview(blob)
    if len(view) < len(MAGIC) + 2:
        raise CorruptCheckpointError("file shorter than header")
    if bytes(view[: len(MAGIC)]) != MAGIC:
        raise UnsupportedFormatError(f"bad magic {bytes(view[:len(MAGIC)])!r}")
    offset = len(MAGIC)
    (version,) = struct.unpack_from("<H", view, offset)
    offset += 2
    if version != VERSION:
        raise UnsupportedFormatError(f"unsupported checkpoint version {version}")

    def take(n: int, what: str) -> memoryview:
        nonlocal offset
        if offset + n > len(view):
            raise CorruptCheckpointError(f"truncated while reading {what}")
        part = view[offset : offset + n]
        offset += n
        return part

    (config_len,) = struct.unpack("<I", take(4, "config length"))
    try:
        config = json.loads(bytes(take(config_len, "config block")).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"config block is not valid JSON: {exc}") from exc

    arrays: dict[str, np.ndarray] = {}
    while offset < len(view):
        (name_len,) = struct.unpack("<I", take(4, "array name length"))
        name = bytes(take(name_len, "array name")).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "array rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "array dims"))
        count = 1
        for d in dims:
            count *= d
        raw = take(4 * count, f"array {name!r} values")
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    return config, arrays
