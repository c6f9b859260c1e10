"""Named float64 tensor container used for branch checkpoints and optimizer state.

Layout (little-endian)::

    b"MBPF" | u32 version=1 | u32 tensor_count
    per tensor: u16 name_len | name (UTF-8) | u32 rows | u32 cols | rows*cols float64
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError

CKPT_MAGIC = b"MBPF"
CKPT_VERSION = 1


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f8")
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        if arr.ndim != 2:
            raise ValidationError(f"tensor {name!r} must be at most 2-D, got shape {arr.shape}")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValidationError(f"tensor name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<II", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_tensors(buf: bytes, path=None) -> dict[str, np.ndarray]:
    def need(pos: int, n: int, what: str):
        if pos + n > len(buf):
            raise FormatError(f"truncated {what}: need {n} bytes, {len(buf) - pos} left", pos, path)

    need(0, 4, "magic")
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {CKPT_MAGIC!r}", 0, path)
    need(4, 8, "header")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported version {version}", 4, path)
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        need(pos, 2, "name length")
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(pos, name_len, "tensor name")
        try:
            name = buf[pos:pos + name_len].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid UTF-8", pos, path) from None
        pos += name_len
        need(pos, 8, f"shape of {name!r}")
        rows, cols = struct.unpack_from("<II", buf, pos)
        pos += 8
        need(pos, 8 * rows * cols, f"data of {name!r}")
        data = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols)
        out[name] = data.astype(np.float64)
        pos += 8 * rows * cols
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after last tensor", pos, path)
    return out


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_tensors(tensors))


def read_tensors(path) -> dict[str, np.ndarray]:
    path = Path(path)
    return decode_tensors(path.read_bytes(), path)
