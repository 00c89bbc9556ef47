"""Per-layer sweep: both training stages plus the task probes on every layer.

Instead of the learned weighted average, each job pins a single upstream
layer, trains stage 1 and stage 2 on it, and probes the task over the three
representation sources.  Each layer's seed is derived from the base seed and
the layer index, so serial and parallel executions produce identical rows.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .ctc import Vocabulary
from .data import UtteranceRecord, load_hidden_states, split_corpus
from .optim import derive_seed
from .probing import ProbeConfig, probe_utterance
from .stage1 import Stage1Config, Stage1Model, eval_stage1, textual_latents, train_stage1
from .stage2 import Stage2Config, Stage2Model, acoustic_latents, eval_stage2, train_stage2


@dataclass(frozen=True)
class LayerSweepRow:
    layer: int
    stage1_wer: float
    stage1_cer: float
    stage2_accuracy: float
    textual_probe: float
    acoustic_probe: float
    raw_probe: float


@dataclass
class LayerSweepReport:
    task: str
    chance_wer: float
    chance_accuracy: float
    rows: list[LayerSweepRow]

    def stage1_table(self) -> str:
        lines = ["layer,wer,cer,chance_wer"]
        for r in self.rows:
            lines.append(f"{r.layer},{r.stage1_wer:.6f},{r.stage1_cer:.6f},"
                         f"{self.chance_wer:.6f}")
        return "\n".join(lines) + "\n"

    def stage2_table(self) -> str:
        lines = ["layer,accuracy,chance"]
        for r in self.rows:
            lines.append(f"{r.layer},{r.stage2_accuracy:.6f},{self.chance_accuracy:.6f}")
        return "\n".join(lines) + "\n"

    def probe_table(self) -> str:
        lines = ["layer,textual,acoustic,raw,chance"]
        for r in self.rows:
            lines.append(f"{r.layer},{r.textual_probe:.6f},{r.acoustic_probe:.6f},"
                         f"{r.raw_probe:.6f},{self.chance_accuracy:.6f}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({
            "task": self.task,
            "chance_wer": self.chance_wer,
            "chance_accuracy": self.chance_accuracy,
            "rows": [asdict(r) for r in self.rows],
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "LayerSweepReport":
        payload = json.loads(text)
        return cls(task=payload["task"], chance_wer=payload["chance_wer"],
                   chance_accuracy=payload["chance_accuracy"],
                   rows=[LayerSweepRow(**r) for r in payload["rows"]])

    def save(self, path: Path | str) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: Path | str) -> "LayerSweepReport":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def layer_config(config, layer: int):
    """Pin one layer and derive its seed; serial and parallel runs agree."""
    return replace(config, layer=layer, seed=derive_seed(config.seed, "layer", layer))


def probe_layer(records: Sequence[UtteranceRecord], stage1: Stage1Model,
                stage2: Stage2Model, task: str, config: ProbeConfig,
                layer: int) -> tuple[float, float, float]:
    """Task-probe accuracy on (textual, acoustic, raw) layer-l representations."""
    labeled = [r for r in records if task in (r.labels or {})]
    labels = [int(r.labels[task]) for r in labeled]
    sources = {
        "textual": lambda r: textual_latents(stage1, r),
        "acoustic": lambda r: acoustic_latents(stage2, r),
        "raw": lambda r: np.asarray(load_hidden_states(r).values[layer]),
    }
    out = []
    for name, source in sources.items():
        seeded = replace(config, seed=derive_seed(config.seed, "layer", layer, name) % 2**31)
        out.append(probe_utterance(source, labeled, labels, seeded))
    return tuple(out)


def layerwise_sweep(
    records: Sequence[UtteranceRecord],
    vocab: Vocabulary,
    stage1_config: Stage1Config,
    stage2_config: Stage2Config,
    probe_config: ProbeConfig,
    workers: int = 1,
) -> tuple[LayerSweepReport, dict[int, tuple[Stage1Model, Stage2Model]]]:
    """Train and probe every layer; returns the report and the per-layer models."""
    if not records:
        raise ValueError("empty corpus")
    layer_count = load_hidden_states(records[0]).layer_count
    if layer_count < 2:
        raise ValueError("layer sweep needs at least two layers")
    task = stage2_config.task
    labels = [int(r.labels[task]) for r in records if task in (r.labels or {})]
    if not labels:
        raise ValueError(f"no records carry a {task!r} label")
    class_count = max(labels) + 1
    train, test = split_corpus(records)

    def one(layer: int) -> tuple[LayerSweepRow, tuple[Stage1Model, Stage2Model]]:
        s1 = train_stage1(train, vocab, layer_config(stage1_config, layer))
        s2 = train_stage2(train, s1, layer_config(stage2_config, layer))
        m1 = eval_stage1(s1, test)
        accuracy = eval_stage2(s2, test)["accuracy"]
        probes = probe_layer(records, s1, s2, task, probe_config, layer)
        row = LayerSweepRow(layer, m1["wer"], m1["cer"], accuracy, *probes)
        return row, (s1, s2)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(layer_count)))
    else:
        results = [one(layer) for layer in range(layer_count)]

    report = LayerSweepReport(
        task=task,
        chance_wer=1.0,
        chance_accuracy=1.0 / class_count,
        rows=[row for row, _ in results],
    )
    models = {layer: pair for layer, (_, pair) in enumerate(results)}
    return report, models
