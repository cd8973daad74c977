"""
Binary array container.
Magic-tagged, versioned files holding a JSON header and little-endian arrays,
closed by a CRC32 trailer. Optimizer checkpoints and body models use it.

Layout (little-endian):
    4s   magic
    u32  format version
    u32  header length H
    H    UTF-8 JSON: {"meta": {...}, "arrays": [[name, dtype, shape], ...]}
    ...  raw array bytes, in manifest order ("f8" or "i8")
    u32  CRC32 of every preceding byte
"""

import json
import struct
import zlib
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from core.errors import CheckpointVersionError, CorruptCheckpointError

_DTYPES = {"f8": "<f8", "i8": "<i8"}


def _kind(array: np.ndarray) -> str:
    return "i8" if np.issubdtype(array.dtype, np.integer) or array.dtype == bool else "f8"


def write_container(path, magic: bytes, version: int, meta: dict, arrays: Dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {name: np.asarray(a) for name, a in arrays.items()}
    manifest = [[name, _kind(a), list(a.shape)] for name, a in arrays.items()]
    header = json.dumps({"meta": meta, "arrays": manifest}, sort_keys=True).encode("utf-8")

    body = bytearray(magic)
    body += struct.pack("<II", version, len(header))
    body += header
    for (_, kind, _), a in zip(manifest, arrays.values()):
        body += np.ascontiguousarray(a, dtype=_DTYPES[kind]).tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)

    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(body))
    tmp.replace(path)


def read_container(path, magic: bytes, version: int) -> Tuple[dict, Dict[str, np.ndarray]]:
    path = Path(path)
    data = path.read_bytes()
    head = len(magic) + 8
    if len(data) < head + 4 or data[:len(magic)] != magic:
        raise CorruptCheckpointError(f"{path.name}: bad magic or truncated file")
    found, header_len = struct.unpack_from("<II", data, len(magic))
    if found != version:
        raise CheckpointVersionError(f"{path.name}: format version {found}, expected {version}")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise CorruptCheckpointError(f"{path.name}: checksum mismatch (truncated or corrupt)")

    try:
        header = json.loads(data[head:head + header_len].decode("utf-8"))
        manifest = header["arrays"]
        meta = header["meta"]
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as e:
        raise CorruptCheckpointError(f"{path.name}: unreadable header") from e

    offset = head + header_len
    end = len(data) - 4
    arrays = {}
    for name, kind, shape in manifest:
        if kind not in _DTYPES:
            raise CorruptCheckpointError(f"{path.name}: unknown dtype '{kind}' for '{name}'")
        count = int(np.prod(shape)) if shape else 1
        if offset + 8 * count > end:
            raise CorruptCheckpointError(f"{path.name}: array '{name}' runs past end of file")
        arrays[name] = np.frombuffer(data, dtype=_DTYPES[kind], count=count, offset=offset).reshape(shape).copy()
        offset += 8 * count
    if offset != end:
        raise CorruptCheckpointError(f"{path.name}: {end - offset} unexpected trailing bytes")
    return meta, arrays
