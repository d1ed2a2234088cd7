"""Versioned binary checkpoint container.

Layout: 8-byte magic, u32 format version, u64 manifest length, UTF-8 JSON
manifest (hyper, vocab layout, step, seed, parameter names/shapes in
order), then raw little-endian float64 blocks in manifest order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ManifestMismatch
from .model import Hyper, ModelParams
from .vocab import UnifiedVocab

MAGIC = b"MTSQCKPT"
VERSION = 1


def save_checkpoint(path: Path | str, params: ModelParams, step: int, seed: int) -> None:
    manifest = {
        "format": "mtseq-checkpoint",
        "version": VERSION,
        "hyper": params.hyper.to_dict(),
        "vocab": params.vocab.layout(),
        "step": step,
        "seed": seed,
        "params": [{"name": n, "shape": list(params[n].data.shape)} for n in params.names()],
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(blob)))
        f.write(blob)
        for name in params.names():
            f.write(np.ascontiguousarray(params[name].data).astype("<f8").tobytes())


def load_checkpoint(path: Path | str, expect_vocab: UnifiedVocab | None = None):
    """Load (params, manifest); optionally verify the vocabulary layout."""
    from .autodiff import Tensor

    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ManifestMismatch(f"{path} is not a checkpoint (bad magic)")
    version, mlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise ManifestMismatch(f"unsupported checkpoint version {version}")
    manifest = json.loads(raw[20:20 + mlen].decode("utf-8"))
    vocab = UnifiedVocab(n_loc=manifest["vocab"]["n_loc"])
    if vocab.layout() != manifest["vocab"]:
        raise ManifestMismatch("manifest vocab layout is internally inconsistent")
    if expect_vocab is not None and expect_vocab.layout() != manifest["vocab"]:
        raise ManifestMismatch(
            f"checkpoint vocab {manifest['vocab']} != expected {expect_vocab.layout()}")
    hyper = Hyper(**manifest["hyper"])
    tensors = {}
    offset = 20 + mlen
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        block = np.frombuffer(raw, dtype="<f8", count=size, offset=offset)
        tensors[entry["name"]] = Tensor(block.reshape(shape).astype(np.float64))
        offset += size * 8
    if offset != len(raw):
        raise ManifestMismatch("checkpoint has trailing or missing parameter bytes")
    return ModelParams(hyper, vocab, tensors), manifest
