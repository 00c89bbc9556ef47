"""Frame-level saliency and its agreement with acoustic/textual evidence.

Three attribution routes produce per-frame probability vectors:

* acoustic attention — the stage-2 pooler's weights;
* textual attention — the weights of an attention-pooled task probe
  trained on the frozen stage-1 textual means;
* integrated gradients — path attribution of a raw-state classifier's
  predicted-class logit, taken with respect to its layer-mixed frames.

Each is compared against per-frame feature vectors (intensity extrema,
pitch extrema, word polarity, all in [0, 1]) by a plain dot product; a
uniform score vector serves as the chance baseline.
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
import torch

from .data import UtteranceRecord
from .features import FrameSeries, align_words_to_frames
from .optim import derive_seed
from .probing import ProbeConfig, UtteranceProbe, train_utterance_probe
from .stage1 import Stage1Model, textual_latents
from .stage2 import Stage2Model, predict


def detect_extrema(series: FrameSeries | np.ndarray, window: int = 5,
                   prominence: float = 0.1,
                   valid: np.ndarray | None = None) -> np.ndarray:
    """Flag frames that are strict extrema of their window, 0/1 per frame.

    A frame qualifies when it is the strict maximum (or minimum) among the
    ``window`` frames centred on it and its prominence — the gap to the
    window's opposite bound — reaches ``prominence`` times the series
    range. Frames whose window would run off either end never qualify, and
    frames marked invalid (e.g. unvoiced pitch) are excluded both as
    candidates and as comparison values.
    """
    values = np.asarray(series.values if isinstance(series, FrameSeries) else series,
                        dtype=np.float64)
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be odd and >= 3")
    if not 0.0 < prominence < 1.0:
        raise ValueError("prominence fraction must be in (0, 1)")
    frames = len(values)
    flags = np.zeros(frames)
    if frames < window:
        warnings.warn(f"series of {frames} frames is shorter than window {window}")
        return flags
    if valid is None:
        valid = np.ones(frames, dtype=bool)
    else:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != values.shape:
            raise ValueError("valid mask must match the series length")
    if valid.sum() < 2:
        return flags
    span = values[valid].max() - values[valid].min()
    if span <= 0.0:
        return flags
    half = window // 2
    for t in range(half, frames - half):
        if not valid[t]:
            continue
        window_mask = valid[t - half:t + half + 1].copy()
        window_vals = values[t - half:t + half + 1][window_mask]
        if len(window_vals) < 2:
            continue
        others = np.delete(values[t - half:t + half + 1], half)
        others = others[np.delete(window_mask, half)]
        if len(others) == 0:
            continue
        is_max = values[t] > others.max()
        is_min = values[t] < others.min()
        if is_max and values[t] - window_vals.min() >= prominence * span:
            flags[t] = 1.0
        elif is_min and window_vals.max() - values[t] >= prominence * span:
            flags[t] = 1.0
    return flags


def polarity_frames(word_timings, lexicon: dict[str, float], total_time: float,
                    frame_count: int) -> np.ndarray:
    """Per-frame |polarity| of the covering word; overlaps keep the maximum."""
    out = np.zeros(frame_count)
    aligned = align_words_to_frames(word_timings, total_time, frame_count)
    for word, f_start, f_end in aligned:
        magnitude = abs(lexicon.get(word, 0.0))
        if magnitude == 0.0:
            continue
        last = min(f_end, frame_count - 1)
        for t in range(f_start, last + 1):
            out[t] = max(out[t], magnitude)
    return out


@dataclass
class FrameFeatureVector:
    """Per-frame evidence channels, each in [0, 1]."""

    intensity_extremum: np.ndarray | None
    pitch_extremum: np.ndarray | None
    polarity: np.ndarray | None

    def __post_init__(self) -> None:
        for name, values in self.items():
            if np.any((values < 0) | (values > 1)):
                raise ValueError(f"feature {name} must lie in [0, 1]")

    def items(self) -> list[tuple[str, np.ndarray]]:
        pairs = []
        for name in ("intensity_extremum", "pitch_extremum", "polarity"):
            values = getattr(self, name)
            if values is not None:
                pairs.append((name, np.asarray(values, dtype=np.float64)))
        return pairs


def record_features(record: UtteranceRecord, lexicon: dict[str, float],
                    window: int = 5, prominence: float = 0.1
                    ) -> FrameFeatureVector:
    """Feature channels for one record; missing inputs leave channels out."""
    intensity = pitch = polarity = None
    frames = record.frames
    if record.frame_series:
        if "intensity" in record.frame_series:
            intensity = detect_extrema(
                np.asarray(record.frame_series["intensity"]), window, prominence
            )
            frames = len(intensity)
        if "pitch" in record.frame_series:
            series = np.asarray(record.frame_series["pitch"], dtype=np.float64)
            valid = series > 0 if (series <= 0).any() else None
            pitch = detect_extrema(series, window, prominence, valid)
            frames = len(pitch)
    if record.word_timings is not None and frames is not None:
        polarity = polarity_frames(record.word_timings, lexicon,
                                   record.duration, frames)
    elif record.word_timings is None:
        warnings.warn(f"record {record.id}: no word timings; polarity omitted")
    return FrameFeatureVector(intensity, pitch, polarity)


@dataclass
class IGResult:
    scores: np.ndarray       # nonnegative, sums to 1
    signed: np.ndarray       # raw per-frame sums (completeness operand)
    prediction_delta: float  # F(input) - F(baseline)

    @property
    def completeness_gap(self) -> float:
        return abs(float(self.signed.sum()) - self.prediction_delta)


def integrated_gradients(logit_fn: Callable[[torch.Tensor], torch.Tensor],
                         frames: np.ndarray, steps: int = 64,
                         baseline: np.ndarray | None = None) -> IGResult:
    """Midpoint-rule integrated gradients of a scalar logit over frames.

    ``logit_fn`` maps a [T, D] tensor to the scalar to attribute (the
    predicted-class logit).  Per-frame attribution is the feature-dimension
    sum of (input - baseline) * average gradient; scores are the absolute
    values normalized to sum 1.  An all-zero attribution normalizes to the
    uniform vector with a warning.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    frames = np.asarray(frames, dtype=np.float64)
    if baseline is None:
        baseline = np.zeros_like(frames)
    baseline = np.asarray(baseline, dtype=np.float64)
    if baseline.shape != frames.shape:
        raise ValueError("baseline shape must match the input")
    delta = frames - baseline
    grad_sum = np.zeros_like(frames)
    for k in range(steps):
        alpha = (k + 0.5) / steps
        point = torch.tensor(baseline + alpha * delta, dtype=torch.float64,
                             requires_grad=True)
        value = logit_fn(point)
        if value.ndim != 0:
            raise ValueError("logit_fn must return a scalar")
        value.backward()
        grad_sum += point.grad.numpy()
    signed = (delta * (grad_sum / steps)).sum(axis=1)

    with torch.no_grad():
        at_input = float(logit_fn(torch.tensor(frames, dtype=torch.float64)))
        at_baseline = float(logit_fn(torch.tensor(baseline, dtype=torch.float64)))

    magnitude = np.abs(signed)
    total = magnitude.sum()
    if total <= 0.0:
        warnings.warn("all-zero attributions; falling back to uniform scores")
        scores = np.full(len(frames), 1.0 / len(frames))
    else:
        scores = magnitude / total
    return IGResult(scores, signed, at_input - at_baseline)


def agreement(scores: np.ndarray, features: FrameFeatureVector) -> dict[str, float]:
    """Dot product of a per-frame score vector with each feature channel."""
    scores = np.asarray(scores, dtype=np.float64)
    out = {}
    for name, values in features.items():
        if len(values) != len(scores):
            raise ValueError(
                f"feature {name} has {len(values)} frames, scores have {len(scores)}"
            )
        out[name] = float(scores @ values)
    return out


def mean_agreement(score_lists: Sequence[np.ndarray],
                   feature_lists: Sequence[FrameFeatureVector]) -> dict[str, float]:
    """Per-feature agreement averaged over a record set."""
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    for scores, features in zip(score_lists, feature_lists):
        for name, value in agreement(scores, features).items():
            sums[name] = sums.get(name, 0.0) + value
            counts[name] = counts.get(name, 0) + 1
    return {name: sums[name] / counts[name] for name in sums}


def uniform_scores(frame_count: int) -> np.ndarray:
    return np.full(frame_count, 1.0 / frame_count)


def textual_attention_scores(stage1: Stage1Model,
                             records: Sequence[UtteranceRecord], task: str,
                             config: ProbeConfig
                             ) -> tuple[list[np.ndarray], UtteranceProbe]:
    """Attention weights of a task probe trained on frozen textual means.

    The probe trains on every record it will score: attribution inspects
    where a fitted model attends, so holding data out would only starve it.
    """
    labels = [int(r.labels[task]) for r in records]
    source = lambda record: textual_latents(stage1, record)
    probe, _ = train_utterance_probe(source, records, labels,
                                     replace(config, test_fraction=0.0))
    weights = [
        probe.attention(torch.from_numpy(source(r).astype(np.float32)))
        for r in records
    ]
    return weights, probe


def raw_state_classifier(records: Sequence[UtteranceRecord], task: str,
                         config: ProbeConfig) -> UtteranceProbe:
    """Attention-pooled classifier over raw (layer-mixed) hidden states."""
    labels = [int(r.labels[task]) for r in records]
    probe, _ = train_utterance_probe("raw", records, labels,
                                     replace(config, test_fraction=0.0))
    return probe


def ig_scores_for_record(probe: UtteranceProbe, record: UtteranceRecord,
                         steps: int = 64) -> IGResult:
    """IG of the raw-state classifier w.r.t. its layer-mixed frames."""
    from .stage1 import _hidden_tensor

    with torch.no_grad():
        mixed = probe.mix(_hidden_tensor(record)).numpy().astype(np.float64)
        predicted = int(torch.argmax(
            probe.classifier(probe.pooler(torch.from_numpy(
                mixed.astype(np.float32)))[0])
        ))

    probe_f64 = _as_float64(probe)

    def logit_fn(x: torch.Tensor) -> torch.Tensor:
        pooled, _ = probe_f64.pooler(x)
        return probe_f64.classifier(pooled)[predicted]

    return integrated_gradients(logit_fn, mixed, steps)


def _as_float64(probe: UtteranceProbe) -> UtteranceProbe:
    clone = UtteranceProbe(probe.classifier.in_features,
                           probe.classifier.out_features,
                           None)
    clone.load_state_dict(
        {k: v for k, v in probe.state_dict().items() if not k.startswith("layer_logits")},
        strict=True,
    )
    clone.double()
    clone.requires_grad_(False)
    for p in clone.pooler.parameters():
        p.requires_grad_(False)
    return clone


@dataclass
class AttributionResult:
    record_id: str
    acoustic_attention: np.ndarray
    textual_attention: np.ndarray
    ig: np.ndarray
    features: FrameFeatureVector

    def score_vectors(self) -> dict[str, np.ndarray]:
        frames = len(self.acoustic_attention)
        return {
            "acoustic_attention": self.acoustic_attention,
            "textual_attention": self.textual_attention,
            "ig": self.ig,
            "uniform": uniform_scores(frames),
        }

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer)
        feature_names = [name for name, _ in self.features.items()]
        writer.writerow(["frame", "acoustic_attention", "textual_attention",
                         "ig", "uniform"] + feature_names)
        vectors = self.score_vectors()
        features = dict(self.features.items())
        for t in range(len(self.acoustic_attention)):
            row = [t] + [f"{vectors[k][t]:.8f}" for k in
                         ("acoustic_attention", "textual_attention", "ig", "uniform")]
            row += [f"{features[name][t]:.6f}" for name in feature_names]
            writer.writerow(row)
        return buffer.getvalue()

    def to_json(self) -> str:
        payload = {
            "record_id": self.record_id,
            "scores": {k: v.tolist() for k, v in self.score_vectors().items()},
            "features": {name: values.tolist()
                         for name, values in self.features.items()},
        }
        return json.dumps(payload, indent=2)


def run_attribution(records: Sequence[UtteranceRecord], stage1: Stage1Model,
                    stage2: Stage2Model, lexicon: dict[str, float],
                    config: ProbeConfig, ig_steps: int = 64,
                    window: int = 5, prominence: float = 0.1
                    ) -> tuple[list[AttributionResult], dict[str, dict[str, float]]]:
    """Full attribution pass: per-record scores plus the mean-agreement table.

    The table maps each score route (including the uniform baseline) to its
    mean per-feature agreement over the record set.
    """
    task = stage2.config.task
    usable = [r for r in records if task in r.labels]
    textual_weights, _ = textual_attention_scores(
        stage1, usable, task,
        _seeded(config, derive_seed(config.seed, "textual-attention") % 2**31),
    )
    raw_probe = raw_state_classifier(
        usable, task,
        _seeded(config, derive_seed(config.seed, "ig-classifier") % 2**31),
    )
    results = []
    for record, textual in zip(usable, textual_weights):
        _, acoustic = predict(stage2, record)
        ig = ig_scores_for_record(raw_probe, record, ig_steps)
        features = record_features(record, lexicon, window, prominence)
        results.append(AttributionResult(
            record_id=record.id,
            acoustic_attention=acoustic,
            textual_attention=textual,
            ig=ig.scores,
            features=features,
        ))
    table: dict[str, dict[str, float]] = {}
    for route in ("acoustic_attention", "textual_attention", "ig", "uniform"):
        table[route] = mean_agreement(
            [r.score_vectors()[route] for r in results],
            [r.features for r in results],
        )
    return results, table


def _seeded(config: ProbeConfig, seed: int) -> ProbeConfig:
    from dataclasses import replace
    return replace(config, seed=seed)


def load_lexicon(path) -> dict[str, float]:
    """Read a tab-separated word/polarity file; polarities lie in [-1, 1]."""
    lexicon = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                word, value = line.split("\t")
                polarity = float(value)
            except ValueError as exc:
                raise ValueError(f"lexicon line {line_no}: {line!r}: {exc}") from exc
            if not -1.0 <= polarity <= 1.0:
                raise ValueError(f"lexicon line {line_no}: polarity {polarity} outside [-1, 1]")
            lexicon[word] = polarity
    return lexicon


def save_lexicon(lexicon: dict[str, float], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for word in sorted(lexicon):
            fh.write(f"{word}\t{lexicon[word]}\n")
