"""Single-file checkpoints: a JSON index followed by per-tensor binary blobs.

Each tensor is stored in the same binary container used for hidden states
(padded to three axes); the index records every tensor's true shape and
byte span plus a free-form metadata dictionary (config snapshot, corpus
fingerprint, vocabulary, ...).  Round trips are bit-exact for float32.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .data import FormatError, parse_hidden_blob

CKPT_MAGIC = b"VCKP"


def file_fingerprint(path: Path | str) -> str:
    """sha256 of a file's bytes; ties checkpoints to what they were built from."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _to_blob(values: np.ndarray) -> bytes:
    padded = values.reshape((1,) * (3 - values.ndim) + values.shape)
    layers, frames, width = padded.shape
    body = np.ascontiguousarray(padded, dtype="<f4").tobytes(order="C")
    return b"HST1" + struct.pack("<III", layers, frames, width) + body


def save_checkpoint(path: Path | str, tensors: Mapping[str, torch.Tensor | np.ndarray],
                    meta: dict) -> None:
    blobs = []
    index_tensors = {}
    offset = 0
    for name, tensor in tensors.items():
        values = tensor.detach().cpu().numpy() if isinstance(tensor, torch.Tensor) else np.asarray(tensor)
        if values.ndim == 0:
            values = values.reshape(1)
        if values.ndim > 3:
            raise ValueError(f"tensor {name!r} has {values.ndim} axes; max 3 supported")
        blob = _to_blob(values.astype(np.float32))
        index_tensors[name] = {
            "offset": offset,
            "length": len(blob),
            "shape": list(values.shape),
        }
        blobs.append(blob)
        offset += len(blob)
    index = json.dumps({"tensors": index_tensors, "meta": meta}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(index)))
        fh.write(index)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: Path | str) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    (index_len,) = struct.unpack("<I", raw[4:8])
    index = json.loads(raw[8:8 + index_len].decode("utf-8"))
    base = 8 + index_len
    tensors = {}
    for name, entry in index["tensors"].items():
        start = base + entry["offset"]
        blob = raw[start:start + entry["length"]]
        values = parse_hidden_blob(blob, name=f"{path}:{name}")
        tensors[name] = values.reshape(entry["shape"])
    return tensors, index["meta"]


def module_tensors(module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return dict(module.state_dict())


def load_module_tensors(module: torch.nn.Module, tensors: Mapping[str, np.ndarray]) -> None:
    state = {name: torch.from_numpy(np.ascontiguousarray(values, dtype=np.float32))
             for name, values in tensors.items()}
    module.load_state_dict(state)
