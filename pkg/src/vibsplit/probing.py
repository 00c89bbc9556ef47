"""Disentanglement probes over raw hidden states or frozen latents.

Probes are deliberately lightweight: a single affine map (CTC probe) or an
attention pooler plus affine classifier (utterance probe), with the same
optimizer budget as the main trainers so numbers are comparable. The
probed representations are never modified — raw-state probes train their
own layer weighting, latent probes consume precomputed posterior means.

A "source" is either the string ``"raw"`` (probe the upstream hidden
states through a trainable layer mix) or a callable mapping a record to a
fixed [frames, dim] array (e.g. frozen textual or acoustic means).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .ctc import Vocabulary, ctc_loss, edit_distance, greedy_decode, min_frames_for_target
from .data import UtteranceRecord, layer_mix, split_corpus
from .optim import (
    DivergenceError,
    clip_gradients,
    derive_seed,
    make_adamw,
    make_scheduler,
    shuffled_indices,
)
from .stage1 import _hidden_tensor
from .stage2 import AttentionPooler
from .vib import init_affine

Source = str | Callable[[UtteranceRecord], np.ndarray]

CHANCE_WER = 1.0


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 50
    lr: float = 3e-3  # bare affine heads need a hotter rate than the trainers
    warmup_ratio: float = 0.1
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    batch: int = 8  # utterance probes; the CTC probe steps per utterance
    seed: int = 0
    test_fraction: float = 0.2

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.lr <= 0 or self.batch < 1:
            raise ValueError("epochs and batch must be >= 1 and lr positive")
        if not 0.0 <= self.test_fraction < 1.0:
            # 0.0 trains on everything and reports nan accuracy
            raise ValueError("test_fraction must be in [0, 1)")


def _prepare(source: Source, records: Sequence[UtteranceRecord]
             ) -> tuple[list[Tensor], int, bool]:
    """Per-record input tensors, their width, and whether mixing is needed."""
    inputs = []
    if source == "raw":
        for record in records:
            inputs.append(_hidden_tensor(record))
        return inputs, inputs[0].shape[2], True
    if isinstance(source, str):
        raise ValueError(f"unknown source {source!r}")
    for record in records:
        values = np.asarray(source(record), dtype=np.float32)
        if values.ndim != 2:
            raise ValueError(f"record {record.id}: representation must be [T, dim]")
        inputs.append(torch.from_numpy(values))
    return inputs, inputs[0].shape[1], False


class TranscriptionProbe(nn.Module):
    """Affine frame classifier (optionally over a trainable layer mix)."""

    def __init__(self, width: int, num_classes: int, layer_count: int | None):
        super().__init__()
        self.layer_logits = (
            nn.Parameter(torch.zeros(layer_count)) if layer_count else None
        )
        self.head = nn.Linear(width, num_classes)

    def mix(self, x: Tensor) -> Tensor:
        if self.layer_logits is None:
            return x
        return layer_mix(x, self.layer_logits)

    def forward(self, x: Tensor) -> Tensor:
        return torch.log_softmax(self.head(self.mix(x)), dim=1)


class UtteranceProbe(nn.Module):
    """Attention-pooled affine classifier (optionally over a layer mix)."""

    def __init__(self, width: int, num_classes: int, layer_count: int | None):
        super().__init__()
        self.layer_logits = (
            nn.Parameter(torch.zeros(layer_count)) if layer_count else None
        )
        self.pooler = AttentionPooler(width)
        self.classifier = nn.Linear(width, num_classes)

    def initialize(self, rng: np.random.Generator) -> None:
        self.pooler.initialize(rng)
        init_affine(self.classifier, rng)

    def mix(self, x: Tensor) -> Tensor:
        if self.layer_logits is None:
            return x
        return layer_mix(x, self.layer_logits)

    def forward(self, x: Tensor) -> Tensor:
        logits, _ = self.forward_with_attention(x)
        return logits

    def forward_with_attention(self, x: Tensor) -> tuple[Tensor, Tensor]:
        pooled, weights = self.pooler(self.mix(x))
        return self.classifier(pooled), weights

    def attention(self, x: Tensor) -> np.ndarray:
        with torch.no_grad():
            _, weights = self.forward_with_attention(x)
        return weights.numpy()


def probe_transcription(source: Source, records: Sequence[UtteranceRecord],
                        vocab: Vocabulary, config: ProbeConfig) -> float:
    """Held-out greedy WER of a linear CTC probe (no bottleneck, no KL)."""
    probe, _, test_idx, inputs, _ = train_transcription_probe(
        source, records, vocab, config
    )
    return _transcription_wer(
        probe, [inputs[i] for i in test_idx],
        [records[i].transcript for i in test_idx]
    )


def train_transcription_probe(source: Source, records: Sequence[UtteranceRecord],
                              vocab: Vocabulary, config: ProbeConfig):
    train_idx, test_idx = _split_indices(records, config.test_fraction)
    inputs, width, needs_mix = _prepare(source, records)
    targets = [vocab.encode(r.transcript) for r in records]
    frame_axis = 1 if needs_mix else 0
    usable = [i for i in train_idx
              if min_frames_for_target(targets[i]) <= inputs[i].shape[frame_axis]]
    if not usable:
        raise ValueError("no trainable records for the transcription probe")

    probe = TranscriptionProbe(width, len(vocab.symbols),
                               inputs[0].shape[0] if needs_mix else None)
    init_affine(probe.head, np.random.default_rng(derive_seed(config.seed, "ctc-probe")))
    with torch.no_grad():  # start decodes empty, not arbitrary-length noise
        probe.head.bias[vocab.blank_index] = 1.0
    params = list(probe.parameters())
    optimizer = make_adamw(params, config.lr, config.weight_decay)
    total_steps = config.epochs * len(usable)
    scheduler = make_scheduler(optimizer, total_steps, config.warmup_ratio)
    order_rng = np.random.default_rng(derive_seed(config.seed, "ctc-probe-order"))

    for epoch in range(config.epochs):
        for pos in shuffled_indices(order_rng, len(usable)):
            idx = usable[pos]
            loss = ctc_loss(probe(inputs[idx]), targets[idx], vocab.blank_index)
            if not torch.isfinite(loss):
                raise DivergenceError(
                    f"transcription probe diverged at epoch {epoch}, "
                    f"record {records[idx].id}"
                )
            optimizer.zero_grad()
            loss.backward()
            clip_gradients(params, config.grad_clip)
            optimizer.step()
            scheduler.step()
    probe.eval()
    probe.requires_grad_(False)
    probe.vocab = vocab
    return probe, train_idx, test_idx, inputs, records


def _transcription_wer(probe: TranscriptionProbe, inputs: list[Tensor],
                       transcripts: list[str]) -> float:
    edits = total = 0
    with torch.no_grad():
        for x, transcript in zip(inputs, transcripts):
            hypothesis = greedy_decode(probe(x).numpy(), probe.vocab)
            ref = transcript.split()
            edits += edit_distance(ref, hypothesis.split())
            total += len(ref)
    if total == 0:
        raise ValueError("empty references in probe evaluation")
    return edits / total


def probe_utterance(source: Source, records: Sequence[UtteranceRecord],
                    labels: Sequence[int], config: ProbeConfig) -> float:
    """Held-out accuracy of an attention-pooled affine probe."""
    _, accuracy = train_utterance_probe(source, records, labels, config)
    return accuracy


def train_utterance_probe(source: Source, records: Sequence[UtteranceRecord],
                          labels: Sequence[int], config: ProbeConfig
                          ) -> tuple[UtteranceProbe, float]:
    if len(labels) != len(records):
        raise ValueError("labels must align with records")
    labels = [int(v) for v in labels]
    if len(set(labels)) < 2:
        raise ValueError("need at least two distinct classes to probe")
    num_classes = max(labels) + 1
    train_idx, test_idx = _split_indices(records, config.test_fraction)
    inputs, width, needs_mix = _prepare(source, records)

    probe = UtteranceProbe(width, num_classes,
                           inputs[0].shape[0] if needs_mix else None)
    probe.initialize(np.random.default_rng(derive_seed(config.seed, "utt-probe")))
    params = list(probe.parameters())
    optimizer = make_adamw(params, config.lr, config.weight_decay)
    steps_per_epoch = math.ceil(len(train_idx) / config.batch)
    total_steps = config.epochs * steps_per_epoch
    scheduler = make_scheduler(optimizer, total_steps, config.warmup_ratio)
    ce = nn.CrossEntropyLoss()
    order_rng = np.random.default_rng(derive_seed(config.seed, "utt-probe-order"))

    for epoch in range(config.epochs):
        order = shuffled_indices(order_rng, len(train_idx))
        for batch_start in range(0, len(order), config.batch):
            batch = order[batch_start:batch_start + config.batch]
            optimizer.zero_grad()
            for pos in batch:
                idx = train_idx[pos]
                logits = probe(inputs[idx])
                loss = ce(logits.unsqueeze(0), torch.tensor([labels[idx]]))
                if not torch.isfinite(loss):
                    raise DivergenceError(
                        f"utterance probe diverged at epoch {epoch}, "
                        f"record {records[idx].id}"
                    )
                (loss / len(batch)).backward()
            clip_gradients(params, config.grad_clip)
            optimizer.step()
            scheduler.step()
    probe.eval()
    probe.requires_grad_(False)

    correct = 0
    with torch.no_grad():
        for idx in test_idx:
            correct += int(torch.argmax(probe(inputs[idx]))) == labels[idx]
    return probe, correct / len(test_idx) if test_idx else float("nan")


def _split_indices(records: Sequence[UtteranceRecord], test_fraction: float
                   ) -> tuple[list[int], list[int]]:
    by_id = {record.id: i for i, record in enumerate(records)}
    # salted so probing either half of a prior split still yields both sides
    train, test = split_corpus(records, test_fraction, salt="probe")
    return [by_id[r.id] for r in train], [by_id[r.id] for r in test]


def quantile_bucketize(values: Sequence[float], k: int = 4) -> np.ndarray:
    """Quantile-rank labels 0..k-1; bucket sizes differ by <= 1 absent ties."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1:
        raise ValueError("values must be one-dimensional")
    if k < 1 or k > len(values):
        raise ValueError(f"k={k} must be in [1, {len(values)}]")
    edges = np.quantile(values, [i / k for i in range(1, k)])
    return np.searchsorted(edges, values, side="right").astype(np.int64)


@dataclass(frozen=True)
class ProbeEntry:
    source: str
    task: str
    metric: str  # "wer" or "accuracy"
    value: float
    chance: float
    train_size: int
    test_size: int
    seed: int


@dataclass
class ProbeReport:
    entries: list[ProbeEntry]

    def value(self, source: str, task: str) -> float:
        for entry in self.entries:
            if entry.source == source and entry.task == task:
                return entry.value
        raise KeyError(f"no probe entry for ({source}, {task})")

    def to_json(self) -> str:
        return json.dumps({"entries": [asdict(e) for e in self.entries]}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ProbeReport":
        payload = json.loads(text)
        return cls(entries=[ProbeEntry(**e) for e in payload["entries"]])

    def save(self, path: Path | str) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: Path | str) -> "ProbeReport":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def to_csv(self) -> str:
        lines = ["source,task,metric,value,chance,train_size,test_size,seed"]
        for e in self.entries:
            lines.append(f"{e.source},{e.task},{e.metric},{e.value:.6f},"
                         f"{e.chance:.6f},{e.train_size},{e.test_size},{e.seed}")
        return "\n".join(lines) + "\n"


def _mean_series(record: UtteranceRecord, name: str) -> float:
    series = np.asarray(record.frame_series[name], dtype=np.float64)
    if name == "pitch":
        voiced = series[series > 0]
        if len(voiced):
            return float(voiced.mean())
    return float(series.mean())


def run_sanity_suite(stage1, stage2_models, records: Sequence[UtteranceRecord],
                     vocab: Vocabulary, config: ProbeConfig) -> ProbeReport:
    """The full probe grid: transcription plus utterance-level factors,
    over raw states, frozen textual means, and frozen acoustic means.

    ``stage2_models`` maps task name to a trained acoustic model; probes for
    a task use that task's acoustic latents when available, the first
    supplied model otherwise.
    """
    from .stage1 import textual_latents
    from .stage2 import acoustic_latents

    if not stage2_models:
        raise ValueError("need at least one stage-2 model")
    default_task = next(iter(stage2_models))
    train_count = len(split_corpus(records, config.test_fraction, salt="probe")[0])
    test_count = len(records) - train_count

    def acoustic_source(task: str) -> Source:
        model = stage2_models.get(task, stage2_models[default_task])
        return lambda record: acoustic_latents(model, record)

    def textual_source(record: UtteranceRecord) -> np.ndarray:
        return textual_latents(stage1, record)

    entries: list[ProbeEntry] = []

    def add(source_name: str, task: str, metric: str, value: float,
            chance: float, seed: int) -> None:
        entries.append(ProbeEntry(source_name, task, metric, value, chance,
                                  train_count, test_count, seed))

    utterance_tasks: list[tuple[str, list[int], float]] = []
    have_series = all(r.frame_series is not None
                      and {"pitch", "intensity"} <= set(r.frame_series)
                      for r in records)
    if have_series:
        for name in ("intensity", "pitch"):
            buckets = quantile_bucketize([_mean_series(r, name) for r in records], 4)
            utterance_tasks.append((name, list(buckets), 0.25))
    for label_name in ("gender", "speaker"):
        if all(label_name in r.labels for r in records):
            labels = [int(r.labels[label_name]) for r in records]
            chance = 1.0 / len(set(labels))
            utterance_tasks.append((label_name, labels, chance))

    sources: list[tuple[str, Source]] = [
        ("raw", "raw"),
        ("z_textual", textual_source),
    ]
    for source_name, source in sources:
        seed = derive_seed(config.seed, "suite", source_name, "transcription") % 2**31
        wer_value = probe_transcription(
            source, records, vocab, _with_seed(config, seed)
        )
        add(source_name, "transcription", "wer", wer_value, CHANCE_WER, seed)
        for task, labels, chance in utterance_tasks:
            seed = derive_seed(config.seed, "suite", source_name, task) % 2**31
            acc = probe_utterance(source, records, labels, _with_seed(config, seed))
            add(source_name, task, "accuracy", acc, chance, seed)

    seed = derive_seed(config.seed, "suite", "z_acoustic", "transcription") % 2**31
    wer_value = probe_transcription(
        acoustic_source(default_task), records, vocab, _with_seed(config, seed)
    )
    add("z_acoustic", "transcription", "wer", wer_value, CHANCE_WER, seed)
    for task, labels, chance in utterance_tasks:
        seed = derive_seed(config.seed, "suite", "z_acoustic", task) % 2**31
        acc = probe_utterance(acoustic_source(task), records, labels,
                              _with_seed(config, seed))
        add("z_acoustic", task, "accuracy", acc, chance, seed)
    return ProbeReport(entries)


def _with_seed(config: ProbeConfig, seed: int) -> ProbeConfig:
    return replace(config, seed=seed)
