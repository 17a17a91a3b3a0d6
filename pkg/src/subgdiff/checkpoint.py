"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"SGDF" | u16 version | u32 header length | header JSON (utf-8)
    | u64 parameter count | f64[count] parameters | u32 CRC32 of all prior bytes

The header echoes the denoiser configuration plus any caller metadata.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .denoiser import DenoiserConfig, DenoiserParams

MAGIC = b"SGDF"
VERSION = 1


class CheckpointError(IOError):
    """Raised for corrupt, truncated, or unsupported checkpoint files."""


def dumps(params: DenoiserParams, meta: dict | None = None) -> bytes:
    header = json.dumps(
        {"denoiser": asdict(params.config), "meta": meta or {}}, sort_keys=True
    ).encode()
    flat = params.flatten().astype("<f8")
    body = (
        MAGIC
        + struct.pack("<HI", VERSION, len(header))
        + header
        + struct.pack("<Q", flat.size)
        + flat.tobytes()
    )
    return body + struct.pack("<I", zlib.crc32(body))


def loads(blob: bytes) -> tuple[DenoiserParams, dict]:
    if len(blob) < 10 or blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if len(blob) < 14:
        raise CheckpointError("checkpoint truncated")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    (hlen,) = struct.unpack_from("<I", blob, 6)
    off = 10 + hlen
    if len(blob) < off + 12:
        raise CheckpointError("checkpoint truncated")
    (count,) = struct.unpack_from("<Q", blob, off)
    off += 8
    if len(blob) != off + 8 * count + 4:
        raise CheckpointError("checkpoint truncated or has trailing bytes")
    if zlib.crc32(blob[:-4]) != crc:
        raise CheckpointError("CRC mismatch: checkpoint is corrupt")
    header = json.loads(blob[10 : 10 + hlen].decode())
    cfg = DenoiserConfig(**header["denoiser"])
    flat = np.frombuffer(blob, dtype="<f8", count=count, offset=off).astype(np.float64)
    return DenoiserParams.unflatten(cfg, flat), header.get("meta", {})


def save(path, params: DenoiserParams, meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(params, meta))


def load(path) -> tuple[DenoiserParams, dict]:
    return loads(Path(path).read_bytes())
