"""Binary checkpoints: magic, version, embedded config, parameter records.

Layout (all integers little-endian):

    magic            4 bytes  b"CSDN"
    version          u32      currently 1
    total_length     u64      size of the whole file in bytes
    config_length    u32      canonical config text, utf-8
    config           bytes
    param_count      u32
    per parameter:
        name_length  u32
        name         bytes (utf-8)
        rank         u32
        dims         u32 * rank
        data         float64 little-endian, C order

Round-trips are bit-exact; loading verifies magic, version, declared
total length, and exact consumption of the file.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from typing import Sequence

import numpy as np

from .errors import CheckpointError
from .tensor import Parameter

MAGIC = b"CSDN"
VERSION = 1


def save_checkpoint(path, params: Sequence[Parameter], config_text: str):
    body = bytearray()
    cfg = config_text.encode("utf-8")
    body += struct.pack("<I", len(cfg))
    body += cfg
    body += struct.pack("<I", len(params))
    for p in params:
        name = p.name.encode("utf-8")
        arr = np.ascontiguousarray(p.value.data, dtype="<f8")
        body += struct.pack("<I", len(name))
        body += name
        body += struct.pack("<I", arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += arr.tobytes(order="C")
    total = 4 + 4 + 8 + len(body)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", total))
        fh.write(bytes(body))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise CheckpointError(
                f"truncated checkpoint: wanted {n} bytes at offset {self.off}, "
                f"file has {len(self.blob)}"
            )
        out = self.blob[self.off : self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def load_checkpoint(path):
    """Returns (config_text, OrderedDict name -> float64 array)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    total = r.u64()
    if total != len(blob):
        raise CheckpointError(
            f"length mismatch: header says {total} bytes, file has {len(blob)}"
        )
    config_text = r.take(r.u32()).decode("utf-8")
    count = r.u32()
    params: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank)) if rank else ()
        size = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(dims)
        params[name] = data.astype(np.float64)
    if r.off != len(blob):
        raise CheckpointError(f"trailing bytes after parameter records: {len(blob) - r.off}")
    return config_text, params


def load_into_head(head, path) -> str:
    """Restore a head's parameters in place; shapes must agree."""
    config_text, stored = load_checkpoint(path)
    own = {p.name: p for p in head.parameters()}
    if set(own) != set(stored):
        missing = sorted(set(own) - set(stored))
        extra = sorted(set(stored) - set(own))
        raise CheckpointError(
            f"parameter names disagree with head (missing {missing[:3]}, extra {extra[:3]})"
        )
    for name, arr in stored.items():
        if own[name].value.data.shape != arr.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint {arr.shape}, "
                f"head {own[name].value.data.shape}"
            )
        own[name].value.data = arr.copy()
    return config_text
