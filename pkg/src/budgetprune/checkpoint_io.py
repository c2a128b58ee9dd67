"""Single-file checkpoint container.

Layout: ``b"BPCK"``, a little-endian u32 format version, a u64 manifest
length, the UTF-8 JSON manifest, then every tensor as a little-endian f32
row-major blob. The manifest lists each tensor's name, shape and byte offset
(relative to the blob section) together with the model config and any
pruning metadata.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Union

import numpy as np

from .config import ModelConfig
from .model import Checkpoint

MAGIC = b"BPCK"
VERSION = 1


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"config": ckpt.config.to_dict(), "tensors": entries, "meta": ckpt.meta}
    head = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(head)))
        f.write(head)
        for b in blobs:
            f.write(b)


def read_manifest(path: Union[str, Path]) -> dict:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path} is not a checkpoint container")
        version, n = struct.unpack("<IQ", f.read(12))
        if version != VERSION:
            raise ValueError(f"unsupported container version {version}")
        return json.loads(f.read(n))


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint container")
    version, n = struct.unpack("<IQ", raw[4:16])
    if version != VERSION:
        raise ValueError(f"unsupported container version {version}")
    manifest = json.loads(raw[16 : 16 + n])
    base = 16 + n
    tensors = {}
    for e in manifest["tensors"]:
        start = base + e["offset"]
        arr = np.frombuffer(raw, dtype="<f4", count=e["nbytes"] // 4, offset=start)
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return Checkpoint(ModelConfig.from_dict(manifest["config"]), tensors, manifest.get("meta", {}))
