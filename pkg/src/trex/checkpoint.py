"""Bit-exact binary checkpoints.

Layout: magic ``TREX`` | u32 version (LE) | u64 header length (LE) |
UTF-8 JSON header | raw row-major tensor bytes in the header's manifest
order. The header carries the model config, vocab, training metadata, and
per-tensor name/shape/dtype, so a file is self-describing.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import Matrix
from .data import CategoryVocab
from .model import ModelConfig, Parameters, _params_from_dict

MAGIC = b"TREX"
VERSION = 1


class CheckpointCorruptError(ValueError):
    """The file is truncated, has a bad magic, or an inconsistent header."""


class CheckpointVersionError(ValueError):
    """The file was written by an incompatible format version."""


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: Parameters
    vocab: CategoryVocab
    metadata: dict = field(default_factory=dict)
    version: int = VERSION


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    tensors = list(ckpt.params.named_tensors())
    manifest = [
        {
            "name": name,
            "rows": m.rows,
            "cols": m.cols,
            "dtype": str(m.data.dtype),
        }
        for name, m in tensors
    ]
    header = {
        "model_config": ckpt.model_config.to_dict(),
        "vocab": list(ckpt.vocab.categories),
        "metadata": ckpt.metadata,
        "tensors": manifest,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, m in tensors:
            fh.write(np.ascontiguousarray(m.data).astype(m.data.dtype, copy=False).tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 4 + 8:
        raise CheckpointCorruptError(f"{path}: file too short to be a checkpoint")
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointCorruptError(f"{path}: bad magic bytes")
    (version,) = struct.unpack_from("<I", raw, len(MAGIC))
    if version != VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version}, this build reads {VERSION}"
        )
    (header_len,) = struct.unpack_from("<Q", raw, len(MAGIC) + 4)
    body_start = len(MAGIC) + 4 + 8
    if body_start + header_len > len(raw):
        raise CheckpointCorruptError(f"{path}: truncated header")
    try:
        header = json.loads(raw[body_start : body_start + header_len].decode("utf-8"))
        cfg = ModelConfig.from_dict(header["model_config"])
        vocab = CategoryVocab(tuple(header["vocab"]))
        manifest = header["tensors"]
        metadata = header.get("metadata", {})
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointCorruptError(f"{path}: unreadable header ({e})") from e

    offset = body_start + header_len
    tensors: dict[str, Matrix] = {}
    for entry in manifest:
        name, rows, cols = entry["name"], int(entry["rows"]), int(entry["cols"])
        dtype = np.dtype(entry["dtype"])
        nbytes = rows * cols * dtype.itemsize
        if offset + nbytes > len(raw):
            raise CheckpointCorruptError(f"{path}: truncated tensor data for {name!r}")
        arr = np.frombuffer(raw, dtype=dtype, count=rows * cols, offset=offset)
        tensors[name] = Matrix.wrap(arr.reshape(rows, cols).copy())
        offset += nbytes
    if offset != len(raw):
        raise CheckpointCorruptError(f"{path}: {len(raw) - offset} trailing bytes")

    try:
        params = _params_from_dict(
            tensors,
            num_encoder_layers=cfg.num_encoder_layers,
            num_decoder_layers=cfg.num_decoder_layers,
            has_positional="positional" in tensors,
        )
    except KeyError as e:
        raise CheckpointCorruptError(f"{path}: manifest missing tensor {e}") from e
    return Checkpoint(
        model_config=cfg, params=params, vocab=vocab, metadata=metadata, version=version
    )
