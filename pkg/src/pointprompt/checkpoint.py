"""Binary checkpoint files separating the frozen backbone from per-task tunables.

Layout (little-endian throughout):
  magic "IDPT" | u32 version=1 | u8 role (0=backbone, 1=tunables)
  u32 config byte length | UTF-8 config text
  u32 tensor count, then per tensor (sorted by name):
    u16 name length | name | u8 dtype (0=f32, 1=f64) | u8 rank | u32 x rank dims
    | raw row-major data
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"IDPT"
VERSION = 1
_ROLES = {"backbone": 0, "tunables": 1}
_ROLE_NAMES = {v: k for k, v in _ROLES.items()}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    role: str
    config_text: str
    tensors: dict[str, np.ndarray]


def save_checkpoint(path, role: str, tensors: dict[str, np.ndarray],
                    config_text: str = "") -> None:
    if role not in _ROLES:
        raise CheckpointError(f"unknown checkpoint role {role!r}")
    if role == "tunables":
        leaked = [n for n in tensors if n.startswith("backbone.")]
        if leaked:
            raise CheckpointError(
                f"tunables checkpoint must not contain backbone tensors: {leaked[:3]}")
    blob = bytearray()
    blob += struct.pack("<4sIB", MAGIC, VERSION, _ROLES[role])
    cfg = config_text.encode("utf-8")
    blob += struct.pack("<I", len(cfg)) + cfg
    blob += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype == np.float32:
            code, arr = 0, arr.astype("<f4", copy=False)
        elif arr.dtype == np.float64:
            code, arr = 1, arr.astype("<f8", copy=False)
        else:
            raise CheckpointError(f"tensor {name} has unsupported dtype {arr.dtype}")
        nm = name.encode("utf-8")
        blob += struct.pack("<H", len(nm)) + nm
        blob += struct.pack("<BB", code, arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc

    view = memoryview(raw)
    pos = 0

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = struct.unpack_from(fmt, view, pos)
        pos += size
        return out

    magic, version, role_code = take("<4sIB")
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if role_code not in _ROLE_NAMES:
        raise CheckpointError(f"{path}: unknown role code {role_code}")
    (cfg_len,) = take("<I")
    if pos + cfg_len > len(raw):
        raise CheckpointError(f"{path}: truncated checkpoint")
    config_text = bytes(view[pos:pos + cfg_len]).decode("utf-8")
    pos += cfg_len
    (count,) = take("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<H")
        if pos + name_len > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint")
        name = bytes(view[pos:pos + name_len]).decode("utf-8")
        pos += name_len
        code, rank = take("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: tensor {name} has unknown dtype code {code}")
        dims = take(f"<{rank}I")
        dtype = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
        if pos + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated tensor data for {name}")
        arr = np.frombuffer(view[pos:pos + nbytes], dtype=dtype).reshape(dims).copy()
        pos += nbytes
        tensors[name] = arr.astype(arr.dtype.newbyteorder("="))
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return Checkpoint(role=_ROLE_NAMES[role_code], config_text=config_text,
                      tensors=tensors)
