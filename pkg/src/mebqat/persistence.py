"""Checkpoint and metrics persistence, plus training/storage cost accounting.

Checkpoint layout (all integers little-endian):

    magic  "MBQT" (4 bytes)
    u16    format version (currently 1)
    u32    tensor count
    per tensor:
        u16     name length, then UTF-8 name
        u8      rank
        u32*r   dims
        f32*n   row-major values
    u32    metadata length, then UTF-8 JSON (sorted keys)

A write/read round trip is bit-exact. The file holds exactly one
parameter set; there are no per-bitwidth copies.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .autodiff import Tensor
from .meta import MetricRow

__all__ = [
    "CheckpointFormatError",
    "write_checkpoint",
    "read_checkpoint",
    "write_metrics",
    "METRICS_HEADER",
    "CostReport",
    "checkpoint_payload_bytes",
]

MAGIC = b"MBQT"
VERSION = 1

METRICS_HEADER = "epoch,branch,b_w,b_a,loss,kd_loss,accuracy,backprops,wall_ms"


class CheckpointFormatError(ValueError):
    """Malformed checkpoint: bad magic, version, or truncated payload."""


def write_checkpoint(
    path, params: dict[str, Union[Tensor, np.ndarray]], meta: dict
) -> None:
    chunks = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(params))]
    for name, value in params.items():
        data = value.data if isinstance(value, Tensor) else np.asarray(value)
        data = np.ascontiguousarray(data, dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes())
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks.append(struct.pack("<I", len(blob)))
    chunks.append(blob)
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        reader = _Reader(f.read())
    if reader.take(4, "magic") != MAGIC:
        raise CheckpointFormatError("bad magic, not a checkpoint file")
    (version,) = struct.unpack("<H", reader.take(2, "version"))
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    (count,) = struct.unpack("<I", reader.take(4, "tensor count"))
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", reader.take(2, "name length"))
        name = reader.take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", reader.take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", reader.take(4 * rank, "dims"))
        n = int(np.prod(dims)) if rank else 1
        payload = reader.take(4 * n, f"values of {name}")
        params[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    (meta_len,) = struct.unpack("<I", reader.take(4, "metadata length"))
    meta = json.loads(reader.take(meta_len, "metadata").decode("utf-8"))
    if reader.pos != len(reader.buf):
        raise CheckpointFormatError("trailing bytes after checkpoint metadata")
    return params, meta


def checkpoint_payload_bytes(params: dict[str, Union[Tensor, np.ndarray]]) -> int:
    """Bytes of raw parameter values (4 per element)."""
    total = 0
    for value in params.values():
        data = value.data if isinstance(value, Tensor) else np.asarray(value)
        total += 4 * data.size
    return total


def write_metrics(path, rows: Sequence[MetricRow]) -> None:
    """Fixed-format CSV; full-precision bitwidths appear as the literal FP."""
    lines = [METRICS_HEADER]
    for r in rows:
        lines.append(
            f"{r.epoch},{r.branch},{r.b_w},{r.b_a},"
            f"{r.loss:.6f},{r.kd_loss:.6f},{r.accuracy:.6f},"
            f"{r.backprops},{r.wall_ms:.6f}"
        )
    with open(path, "w", newline="") as f:
        f.write("\n".join(lines) + "\n")


@dataclass
class CostReport:
    """Training computation and storage costs of a checkpointed run."""

    evaluated_pairs: int  # number of bitwidth settings served at test time
    branches: int  # meta-gradients per outer update
    param_count: int
    param_bytes: int  # checkpoint tensor payload (one parameter set)
    bn_fraction: float
    backprops_per_update: int  # measured meta-gradient backprops
    total_backward_passes: int  # measured, includes inner-loop adaptation

    def lines(self) -> list[str]:
        return [
            f"evaluated bitwidth pairs: {self.evaluated_pairs}",
            f"branches per update:      {self.branches}",
            f"parameters:               {self.param_count}",
            f"parameter bytes:          {self.param_bytes}",
            f"bn fraction:              {self.bn_fraction:.6f}",
            f"backprops per update:     {self.backprops_per_update}",
            f"total backward passes:    {self.total_backward_passes}",
        ]
