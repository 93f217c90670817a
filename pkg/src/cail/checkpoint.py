"""Checkpoint container.

Byte layout (all integers little-endian)::

    magic        8 bytes   b"CAILCKPT"
    version      uint32    currently 1
    header_len   uint64    length of the JSON header in bytes
    header       UTF-8 JSON object (sorted keys); includes "blocks": the count
    blocks       repeated:
        name_len uint16, name (UTF-8)
        rows     uint32, cols uint32
        values   rows*cols float64 little-endian, row-major
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CAILCKPT"
VERSION = 1


def write_checkpoint(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    header = dict(header, blocks=len(arrays))
    head = json.dumps(header, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<IQ", VERSION, len(head)), head]
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        if a.ndim != 2:
            raise ValueError(f"block {name!r} must be a matrix")
        raw = name.encode()
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<II", *a.shape))
        chunks.append(a.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", buf, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 8 + 12
    header = json.loads(buf[pos:pos + hlen].decode())
    pos += hlen
    arrays = {}
    for _ in range(header["blocks"]):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode()
        pos += nlen
        rows, cols = struct.unpack_from("<II", buf, pos)
        pos += 8
        count = rows * cols
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(rows, cols).copy()
        pos += 8 * count
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes")
    return header, arrays
