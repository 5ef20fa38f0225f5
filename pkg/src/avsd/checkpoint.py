"""Checkpoint container.

Layout: ``AVCK`` magic, u32 format version, u32 header length, UTF-8 JSON
header, then the tensor payload as 32-bit little-endian floats. The header
lists every tensor's name, shape, byte offset and byte length relative to
the start of the payload.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

MAGIC = b"AVCK"
VERSION = 1
STAGES = ("pretrain", "si", "sd")


class CheckpointError(ValueError):
    pass


class StageMismatch(CheckpointError):
    pass


def config_digest(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=list)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class Checkpoint:
    stage: str
    tensors: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    vocabulary: str = ""
    speaker_id: str | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise CheckpointError(f"unknown stage {self.stage!r}")

    @property
    def config_digest(self) -> str:
        return config_digest(self.config)

    def expect_stage(self, *stages: str) -> "Checkpoint":
        if self.stage not in stages:
            raise StageMismatch(f"expected a {'/'.join(stages)} checkpoint, got stage {self.stage!r}")
        return self

    def torch_state(self, dtype=torch.float32) -> dict[str, torch.Tensor]:
        return {k: torch.as_tensor(v, dtype=dtype) for k, v in self.tensors.items()}

    @classmethod
    def from_module(cls, stage: str, state: Mapping[str, torch.Tensor], **kw) -> "Checkpoint":
        tensors = {k: v.detach().cpu().numpy().astype(np.float32) for k, v in state.items()}
        return cls(stage=stage, tensors=tensors, **kw)


def to_bytes(ckpt: Checkpoint) -> bytes:
    table = []
    chunks = []
    offset = 0
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        raw = arr.tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": VERSION,
        "stage": ckpt.stage,
        "speaker_id": ckpt.speaker_id,
        "config": ckpt.config,
        "config_digest": ckpt.config_digest,
        "vocabulary": ckpt.vocabulary,
        "meta": ckpt.meta,
        "tensors": table,
        "payload_bytes": offset,
    }
    hbytes = json.dumps(header, sort_keys=True, default=list).encode("utf-8")
    return MAGIC + struct.pack("<II", VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def from_bytes(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{source}: bad magic {buf[:4]!r}")
    if len(buf) < 12:
        raise CheckpointError(f"{source}: truncated header")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported format version {version}")
    if len(buf) < 12 + hlen:
        raise CheckpointError(f"{source}: truncated header")
    try:
        header = json.loads(buf[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: unreadable header: {exc}") from exc
    if config_digest(header["config"]) != header["config_digest"]:
        raise CheckpointError(f"{source}: config digest does not match stored config")
    size = header["payload_bytes"]
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if entry["nbytes"] != 4 * count or entry["offset"] < 0 or entry["offset"] + entry["nbytes"] > size:
            raise CheckpointError(f"{source}: tensor {entry['name']!r} lies outside the payload")
    payload = buf[12 + hlen :]
    if len(payload) != size:
        raise CheckpointError(f"{source}: payload has {len(payload)} bytes, header says {size}")
    tensors = {}
    for entry in header["tensors"]:
        arr = np.frombuffer(payload, dtype="<f4", count=entry["nbytes"] // 4, offset=entry["offset"])
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
    return Checkpoint(
        stage=header["stage"],
        tensors=tensors,
        config=header["config"],
        vocabulary=header["vocabulary"],
        speaker_id=header["speaker_id"],
        meta=header["meta"],
    )


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes(), str(path))


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def tensors_digest(tensors: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(np.ascontiguousarray(tensors[name], dtype="<f4").tobytes())
    return h.hexdigest()
