"""Versioned binary checkpoints for trained models.

Layout: one UTF-8 JSON header line (format tag, model config, vocabulary
token list and hash, ordered parameter manifest with shapes), then the raw
little-endian float64 payload of every parameter, concatenated in manifest
order.
"""

from __future__ import annotations

import json
from typing import Dict, Tuple

import numpy as np

from .model import CopyFlowModel, ModelConfig
from .vocab import Vocabulary

CHECKPOINT_FORMAT = "statespan-ckpt-v1"


class CheckpointError(Exception):
    pass


def save_checkpoint(path: str, model: CopyFlowModel,
                    meta: Dict | None = None,
                    rng_state: Dict | None = None) -> None:
    names = model.store.names()
    header = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.__dict__,
        "vocab": model.vocab.tokens,
        "vocab_hash": model.vocab.content_hash(),
        "rng_state": rng_state or {},
        "params": [[n, list(model.store[n].data.shape)] for n in names],
        "meta": meta or {},
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for n in names:
            f.write(np.ascontiguousarray(
                model.store[n].data, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> Tuple[CopyFlowModel, Vocabulary, Dict]:
    with open(path, "rb") as f:
        header_line = f.readline()
        payload = f.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable checkpoint header: {e}") from e
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(
            f"unsupported checkpoint format {header.get('format')!r}")
    vocab = Vocabulary(header["vocab"])
    if vocab.content_hash() != header["vocab_hash"]:
        raise CheckpointError("vocabulary hash mismatch")
    config = ModelConfig(**header["config"])
    model = CopyFlowModel(vocab, config, seed=0)
    offset = 0
    for name, shape in header["params"]:
        if name not in model.store.names():
            raise CheckpointError(f"unknown parameter {name!r}")
        n_bytes = int(np.prod(shape)) * 8
        chunk = payload[offset:offset + n_bytes]
        if len(chunk) != n_bytes:
            raise CheckpointError(f"truncated payload at parameter {name!r}")
        offset += n_bytes
        model.store[name].data[...] = np.frombuffer(
            chunk, dtype="<f8").reshape(shape)
    if offset != len(payload):
        raise CheckpointError("trailing bytes after final parameter")
    return model, vocab, header.get("meta", {})
