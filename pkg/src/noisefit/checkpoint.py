"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes   b"NFTCKPT\\0"
    version      uint32    FORMAT_VERSION
    header_len   uint64    length of the JSON header in bytes
    header       UTF-8 JSON, keys sorted, no whitespace:
                   {"meta": {...}, "arrays": [{"name", "shape", "offset", "nbytes"}, ...]}
    payload      concatenated float64 ('<f8') arrays, C order; offsets are
                 relative to the start of the payload
    crc32        uint32    zlib.crc32 of every preceding byte

Floats inside ``meta`` are written with ``repr`` precision, so a
save -> load -> save cycle reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .io import atomic_write_bytes

MAGIC = b"NFTCKPT\0"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def encode_checkpoint(meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in arrays:
        arr = np.asarray(arrays[name], dtype="<f8", order="C")  # keeps 0-d shapes
        raw = arr.tobytes(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True, separators=(",", ":"),
                        allow_nan=False).encode("utf-8")
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < _PREFIX.size + 4:
        raise CheckpointError("checkpoint truncated: missing header")
    magic, version, header_len = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != crc:
        raise CheckpointError("checkpoint corrupt or truncated: checksum mismatch")
    start = _PREFIX.size
    try:
        header = json.loads(blob[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint header unreadable: {exc}") from None
    payload = blob[start + header_len:-4]
    arrays = {}
    for e in header["arrays"]:
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"checkpoint truncated inside array {e['name']!r}")
        arr = np.frombuffer(payload[e["offset"]:end], dtype="<f8").reshape(tuple(e["shape"]))
        arrays[e["name"]] = arr.astype(np.float64)
    return header["meta"], arrays


def save_checkpoint(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode_checkpoint(meta, arrays))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return decode_checkpoint(blob)
