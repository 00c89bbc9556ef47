"""Corpus abstraction: hidden-state ingestion, manifests, and layer selection.

Hidden states arrive as fixed little-endian binary files so any upstream
model can feed the pipeline; records arrive through a JSON-Lines manifest.
Synthetic corpora (see synth.py) produce the same record type with inline
tensors and can be materialized to the identical on-disk formats.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
from torch import Tensor

from .ctc import Vocabulary

HST_MAGIC = b"HST1"


class DataError(Exception):
    """Malformed corpus input: manifest rows, tensor files, or references."""


class FormatError(DataError):
    """Hidden-state file violates the binary container format."""


class ManifestError(DataError):
    """Manifest row fails validation; message names line and field."""


@dataclass
class HiddenStateTensor:
    """Frozen upstream representations, [layers, frames, width] float32."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = self.values
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"expected [L, T, D] with all dims >= 1, got {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("hidden states must be finite")

    @property
    def layer_count(self) -> int:
        return self.values.shape[0]

    @property
    def frame_count(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


class WordTiming(NamedTuple):
    word: str
    start: float
    end: float


@dataclass
class UtteranceRecord:
    """One sample: hidden states (inline or by file), transcript, labels."""

    id: str
    transcript: str
    duration: float
    labels: dict[str, int] = field(default_factory=dict)
    hidden: np.ndarray | None = None
    hidden_ref: str | None = None
    frame_series: dict[str, np.ndarray] | None = None
    word_timings: list[WordTiming] | None = None
    frames: int | None = None
    base_dir: Path | None = None

    def validate(self, vocab: Vocabulary | None = None) -> None:
        if self.hidden is None and self.hidden_ref is None:
            raise ValueError(f"record {self.id}: no hidden states (inline or reference)")
        if self.duration <= 0:
            raise ValueError(f"record {self.id}: duration must be positive")
        if vocab is not None:
            try:
                vocab.encode(self.transcript)
            except ValueError as exc:
                raise ValueError(f"record {self.id}: transcript invalid: {exc}") from exc
        if self.word_timings is not None:
            for w, s, e in self.word_timings:
                if not (0.0 <= s < e <= self.duration + 1e-9):
                    raise ValueError(
                        f"record {self.id}: word {w!r} timing [{s}, {e}] "
                        f"outside [0, {self.duration}]"
                    )
        if self.frame_series is not None and self.frames is not None:
            for name, series in self.frame_series.items():
                if len(series) != self.frames:
                    raise ValueError(
                        f"record {self.id}: series {name!r} length {len(series)} != "
                        f"frame count {self.frames}"
                    )


def write_hidden_states(path: Path | str, values: np.ndarray) -> None:
    """Write an [L, T, D] float32 tensor in the HST1 container."""
    values = np.ascontiguousarray(values, dtype="<f4")
    if values.ndim != 3:
        raise ValueError(f"expected [L, T, D], got {values.shape}")
    layers, frames, width = values.shape
    with open(path, "wb") as fh:
        fh.write(HST_MAGIC)
        fh.write(struct.pack("<III", layers, frames, width))
        fh.write(values.tobytes(order="C"))


def read_hidden_states(path: Path | str) -> np.ndarray:
    """Read an HST1 file back to an [L, T, D] float32 array, bit-exact."""
    with open(path, "rb") as fh:
        blob = fh.read()
    return parse_hidden_blob(blob, name=str(path))


def parse_hidden_blob(blob: bytes, name: str = "<blob>") -> np.ndarray:
    if blob[:4] != HST_MAGIC:
        raise FormatError(f"{name}: bad magic {blob[:4]!r}, expected {HST_MAGIC!r}")
    if len(blob) < 16:
        raise FormatError(f"{name}: truncated header")
    layers, frames, width = struct.unpack("<III", blob[4:16])
    expected = 16 + 4 * layers * frames * width
    if len(blob) != expected:
        raise FormatError(
            f"{name}: payload is {len(blob)} bytes, header implies {expected}"
        )
    flat = np.frombuffer(blob, dtype="<f4", offset=16)
    return flat.reshape(layers, frames, width).copy()


def load_hidden_states(record: UtteranceRecord) -> HiddenStateTensor:
    """Resolve a record's tensor, inline or from its referenced file."""
    if record.hidden is not None:
        tensor = HiddenStateTensor(np.asarray(record.hidden, dtype=np.float32))
    else:
        base = record.base_dir or Path(".")
        path = base / record.hidden_ref
        if not path.exists():
            raise DataError(f"record {record.id}: hidden-state file missing: {path}")
        tensor = HiddenStateTensor(read_hidden_states(path))
    if record.frames is not None and tensor.frame_count != record.frames:
        raise FormatError(
            f"record {record.id}: tensor has {tensor.frame_count} frames, "
            f"manifest declares {record.frames}"
        )
    if record.frame_series is not None:
        for name, series in record.frame_series.items():
            if len(series) != tensor.frame_count:
                raise FormatError(
                    f"record {record.id}: series {name!r} length {len(series)} != "
                    f"tensor frame count {tensor.frame_count}"
                )
    return tensor


_MANIFEST_FIELDS = ("id", "transcript", "duration", "hidden_ref")


def _parse_manifest_row(row: dict, line_no: int, base_dir: Path) -> UtteranceRecord:
    for key in _MANIFEST_FIELDS:
        if key not in row:
            raise ManifestError(f"line {line_no}: missing field {key!r}")
    series = None
    if row.get("frame_series"):
        series = {
            name: np.asarray(vals, dtype=np.float64)
            for name, vals in row["frame_series"].items()
        }
    timings = None
    if row.get("word_timings"):
        try:
            timings = [WordTiming(str(w), float(s), float(e)) for w, s, e in row["word_timings"]]
        except (TypeError, ValueError) as exc:
            raise ManifestError(f"line {line_no}: field 'word_timings': {exc}") from exc
    return UtteranceRecord(
        id=str(row["id"]),
        transcript=str(row["transcript"]),
        duration=float(row["duration"]),
        labels={k: v for k, v in row.get("labels", {}).items()},
        hidden_ref=str(row["hidden_ref"]),
        frame_series=series,
        word_timings=timings,
        frames=int(row["frames"]) if "frames" in row else None,
        base_dir=base_dir,
    )


def load_manifest(path: Path | str, vocab: Vocabulary | None = None) -> list[UtteranceRecord]:
    """Parse a JSON-Lines manifest; every record is validated up front.

    Hidden-state files are only existence-checked when actually loaded.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {line_no}: not valid JSON: {exc}") from exc
            record = _parse_manifest_row(row, line_no, path.parent)
            try:
                record.validate(vocab)
            except ValueError as exc:
                raise ManifestError(f"line {line_no}: {exc}") from exc
            records.append(record)
    return records


def save_manifest(
    records: Sequence[UtteranceRecord],
    manifest_path: Path | str,
    hidden_dir: str = "hidden",
) -> None:
    """Materialize records to a manifest plus one HST1 file per record."""
    manifest_path = Path(manifest_path)
    out_dir = manifest_path.parent / hidden_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(manifest_path, "w", encoding="utf-8") as fh:
        for rec in records:
            tensor = load_hidden_states(rec)
            ref = f"{hidden_dir}/{rec.id}.hst"
            write_hidden_states(manifest_path.parent / ref, tensor.values)
            row: dict = {
                "id": rec.id,
                "transcript": rec.transcript,
                "duration": rec.duration,
                "hidden_ref": ref,
                "frames": tensor.frame_count,
                "labels": rec.labels,
            }
            if rec.frame_series is not None:
                row["frame_series"] = {k: list(map(float, v)) for k, v in rec.frame_series.items()}
            if rec.word_timings is not None:
                row["word_timings"] = [[w, s, e] for w, s, e in rec.word_timings]
            fh.write(json.dumps(row) + "\n")


def layer_mix(hidden: Tensor, layer_logits: Tensor) -> Tensor:
    """Softmax-weighted convex combination over the layer axis, [T, D]."""
    if hidden.ndim != 3:
        raise ValueError(f"expected [L, T, D], got {tuple(hidden.shape)}")
    if layer_logits.ndim != 1 or layer_logits.shape[0] != hidden.shape[0]:
        raise ValueError(
            f"layer_logits length {tuple(layer_logits.shape)} != layer count {hidden.shape[0]}"
        )
    weights = torch.softmax(layer_logits, dim=0)
    return torch.einsum("l,ltd->td", weights, hidden)


def select_layer(hidden: np.ndarray | Tensor, layer: int) -> np.ndarray | Tensor:
    """Slice one layer's [T, D] frame matrix out of [L, T, D]."""
    if hidden.ndim != 3:
        raise ValueError(f"expected [L, T, D], got {tuple(hidden.shape)}")
    if not 0 <= layer < hidden.shape[0]:
        raise ValueError(f"layer {layer} out of range [0, {hidden.shape[0]})")
    return hidden[layer]


def corpus_fingerprint(records: Sequence[UtteranceRecord]) -> str:
    """Stable digest of record identities, labels, and tensor contents."""
    h = hashlib.sha256()
    for rec in sorted(records, key=lambda r: r.id):
        h.update(rec.id.encode())
        h.update(rec.transcript.encode())
        h.update(json.dumps(rec.labels, sort_keys=True).encode())
        h.update(struct.pack("<d", rec.duration))
        tensor = load_hidden_states(rec)
        h.update(np.ascontiguousarray(tensor.values, dtype="<f4").tobytes())
    return h.hexdigest()


def record_split_key(record_id: str, salt: str = "") -> float:
    """Deterministic [0, 1) hash of an utterance id, for corpus splits.

    Distinct salts give independent splits: re-splitting one side of a
    previous split with the same salt would leave one partition empty.
    """
    digest = hashlib.sha256((salt + record_id).encode()).digest()
    return int.from_bytes(digest[:8], "big") / 2**64


def split_corpus(
    records: Sequence[UtteranceRecord], test_fraction: float = 0.2,
    salt: str = "",
) -> tuple[list[UtteranceRecord], list[UtteranceRecord]]:
    """Deterministic train/test split keyed on the utterance id hash."""
    if not 0 <= test_fraction < 1:
        raise ValueError("test_fraction must be in [0, 1)")
    train = [r for r in records if record_split_key(r.id, salt) >= test_fraction]
    test = [r for r in records if record_split_key(r.id, salt) < test_fraction]
    return train, test


def cramers_v(a: Sequence[int], b: Sequence[int]) -> float:
    """Bias-corrected Cramér's V between two categorical series."""
    a = np.asarray(a)
    b = np.asarray(b)
    if len(a) != len(b) or len(a) == 0:
        raise ValueError("series must be nonempty and equal length")
    ua, ia = np.unique(a, return_inverse=True)
    ub, ib = np.unique(b, return_inverse=True)
    r, c = len(ua), len(ub)
    if r < 2 or c < 2:
        return 0.0
    table = np.zeros((r, c))
    np.add.at(table, (ia, ib), 1.0)
    n = table.sum()
    expected = np.outer(table.sum(axis=1), table.sum(axis=0)) / n
    chi2 = ((table - expected) ** 2 / expected).sum()
    phi2 = max(0.0, chi2 / n - (r - 1) * (c - 1) / (n - 1))
    r_adj = r - (r - 1) ** 2 / (n - 1)
    c_adj = c - (c - 1) ** 2 / (n - 1)
    denom = min(r_adj - 1, c_adj - 1)
    return math.sqrt(phi2 / denom) if denom > 0 else 0.0
