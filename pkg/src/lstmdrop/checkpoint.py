"""Self-describing binary checkpoints.

Layout::

    b"LSTMDROP"                  8-byte magic
    uint32 LE                    format version
    uint64 LE                    header length in bytes
    header                       UTF-8 JSON, sorted keys, no whitespace
    tensors                      float64 LE, row-major, in header order
    sha256                       32-byte digest of everything above

The header carries the resolved training config, the vocabulary, training
progress (epoch and dropout draw counter), the gate-order tag and each
tensor's name and shape.  Saving the same objects always yields the same bytes.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Vocabulary
from .errors import CheckpointError
from .model import GATE_ORDER, LayerParams, ModelParams
from .numerics import Tensor
from .training import TrainConfig

MAGIC = b"LSTMDROP"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    params: ModelParams
    config: TrainConfig
    vocab: Vocabulary
    progress: dict = field(default_factory=dict)


def to_bytes(ckpt):
    params = ckpt.params
    named = params.named_tensors()
    header = {
        "version": VERSION,
        "gate_order": "".join(GATE_ORDER),
        "n": params.n,
        "L": params.L,
        "V": params.V,
        "config": ckpt.config.to_dict(),
        "vocab": ckpt.vocab.itos,
        "progress": ckpt.progress,
        "tensors": [[name, list(t.shape)] for name, t in named],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = [_PREFIX.pack(MAGIC, VERSION, len(head)), head]
    body += [np.ascontiguousarray(t.data, dtype="<f8").tobytes() for _, t in named]
    blob = b"".join(body)
    return blob + hashlib.sha256(blob).digest()


def from_bytes(blob, source="<bytes>"):
    if len(blob) < _PREFIX.size + 32:
        raise CheckpointError(f"{source}: truncated checkpoint")
    payload, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{source}: checksum mismatch (corrupt checkpoint)")
    magic, version, head_len = _PREFIX.unpack_from(payload)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint file")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    start = _PREFIX.size
    header = json.loads(payload[start:start + head_len].decode("utf-8"))
    if header["gate_order"] != "".join(GATE_ORDER):
        raise CheckpointError(f"{source}: gate order {header['gate_order']!r} not supported")
    offset = start + head_len
    arrays = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(payload):
            raise CheckpointError(f"{source}: tensor {name} runs past end of file")
        arr = np.frombuffer(payload[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        arrays[name] = Tensor(arr, requires_grad=True, name=name)
        offset = end
    if offset != len(payload):
        raise CheckpointError(f"{source}: {len(payload) - offset} trailing bytes")
    try:
        params = ModelParams(
            arrays["embedding"],
            [LayerParams(arrays[f"layer{k}.W"], arrays[f"layer{k}.b"])
             for k in range(1, header["L"] + 1)],
            arrays["output.W"], arrays["output.b"])
    except KeyError as exc:
        raise CheckpointError(f"{source}: missing tensor {exc}") from None
    return Checkpoint(params, TrainConfig.from_dict(header["config"]),
                      Vocabulary(header["vocab"]), header["progress"])


def save(path, ckpt):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(to_bytes(ckpt))
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc.strerror or exc}") from exc


def load(path):
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from exc
    return from_bytes(blob, str(path))
