"""Versioned binary checkpoint container.

Layout: ``b"DAPO"`` | uint32 LE version | uint64 LE header length | JSON header |
raw little-endian float64 blobs in header order.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DAPO"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        index, blobs, offset = [], [], 0
        for name in sorted(self.arrays):
            a = np.ascontiguousarray(self.arrays[name], dtype="<f8")
            index.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes})
            blobs.append(a.tobytes())
            offset += a.nbytes
        header = json.dumps({"config": self.config, "tensors": index, "meta": self.meta},
                            sort_keys=True, separators=(",", ":")).encode("utf-8")
        return MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(blobs)

    @classmethod
    def from_bytes(cls, raw: bytes) -> Checkpoint:
        if raw[:4] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        if len(raw) < 16:
            raise CheckpointError("truncated checkpoint header")
        version, hlen = struct.unpack("<IQ", raw[4:16])
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        try:
            header = json.loads(raw[16:16 + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
        body = memoryview(raw)[16 + hlen:]
        arrays = {}
        for entry in header["tensors"]:
            start, n = entry["offset"], entry["nbytes"]
            if start + n > len(body):
                raise CheckpointError(f"truncated blob for {entry['name']}")
            arrays[entry["name"]] = np.frombuffer(body[start:start + n], dtype="<f8").astype(np.float64).reshape(
                entry["shape"])
        return cls(header["config"], arrays, header["meta"])

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path: str | Path) -> Checkpoint:
        return cls.from_bytes(Path(path).read_bytes())
