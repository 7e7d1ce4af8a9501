"""Binary checkpoint container.

Layout, all little-endian: magic ``MARECG01``; u32 manifest length and UTF-8
JSON manifest; u32 tensor count; then per tensor u32 name length, name, u32
rank, rank x u64 extents and a float32 payload.
"""

from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

MAGIC = b"MARECG01"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps_checkpoint(manifest: dict, tensors) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    meta = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    items = list(tensors.items())
    buf.write(struct.pack("<I", len(items)))
    for name, value in items:
        arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        arr = np.asarray(arr, dtype="<f4").copy(order="C")  # ascontiguousarray would promote 0-d to 1-d
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def loads_checkpoint(data: bytes) -> tuple[dict, "OrderedDict[str, torch.Tensor]"]:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(len(MAGIC))) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (n_meta,) = struct.unpack("<I", take(4))
    manifest = json.loads(bytes(take(n_meta)).decode("utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {manifest.get('format_version')}")
    (count,) = struct.unpack("<I", take(4))
    tensors = OrderedDict()
    for _ in range(count):
        (n_name,) = struct.unpack("<I", take(4))
        name = bytes(take(n_name)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(bytes(take(4 * n)), dtype="<f4").reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    if pos != len(view):
        raise CheckpointError("trailing bytes after last tensor")
    return manifest, tensors


def save_checkpoint(path, manifest: dict, tensors) -> None:
    Path(path).write_bytes(dumps_checkpoint(manifest, tensors))


def load_checkpoint(path):
    return loads_checkpoint(Path(path).read_bytes())
