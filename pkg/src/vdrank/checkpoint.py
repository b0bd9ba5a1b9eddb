"""Binary checkpoints: a JSON header followed by raw little-endian float64 blobs.

Layout::

    b"ICMUCKPT" | u32 version | u64 header_bytes | header (UTF-8 JSON) | blobs

For each parameter, in header order, the blob holds its values, then the
Adam first and second moments, each ``prod(shape)`` float64s.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, TransformerParams

CKPT_MAGIC = b"ICMUCKPT"
CKPT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: TransformerParams
    vocab_tokens: list[str]
    rng_state: dict | None = None
    counters: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    entries, blobs = [], []
    for p in ckpt.params:
        entries.append({"name": p.name, "shape": list(p.shape), "step_count": p.step_count})
        for arr in (p.data, p.adam_m, p.adam_v):
            blobs.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    header = {
        "config": ckpt.config.to_dict(),
        "vocab": ckpt.vocab_tokens,
        "params": entries,
        "rng_state": ckpt.rng_state,
        "counters": ckpt.counters,
        "extra": ckpt.extra,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(_PREFIX.pack(CKPT_MAGIC, CKPT_VERSION, len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated prefix")
    magic, version, head_len = _PREFIX.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, this build reads {CKPT_VERSION}")
    start = _PREFIX.size
    if len(raw) < start + head_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[start : start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header ({e})") from None
    config = ModelConfig(**header["config"])
    params = TransformerParams(config)
    offset = start + head_len
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        arrays = []
        for _ in range(3):
            end = offset + 8 * n
            if end > len(raw):
                raise CheckpointError(f"{path}: truncated blob for {entry['name']} at offset {offset}")
            arrays.append(np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(shape).astype(np.float64))
            offset = end
        p = params.register(entry["name"], arrays[0])
        p.adam_m, p.adam_v = arrays[1], arrays[2]
        p.step_count = int(entry["step_count"])
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return Checkpoint(config, params, header["vocab"], header["rng_state"], header["counters"], header["extra"])
