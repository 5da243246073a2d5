"""Checkpoint files.

Layout (all integers little-endian u32)::

    b"MXDW" | version | metadata length | metadata (UTF-8 JSON)
    | tensor count | per tensor: name length, name, ndim, dims..., f32 payload
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"MXDW"
VERSION = 1


def save_checkpoint(path: str | Path, tensors: dict[str, torch.Tensor], metadata: dict | None = None) -> None:
    meta = json.dumps(metadata or {}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(tensors)))
        for name, tensor in tensors.items():
            arr = tensor.detach().cpu().numpy().astype("<f4")
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, meta_len = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    metadata = json.loads(data[off:off + meta_len].decode())
    off += meta_len
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + name_len].decode()
        off += name_len
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes")
    return tensors, metadata
