"""Synthetic corpus with ground-truth disentangled factors.

Each utterance gets an independent transcript (drawn from a fixed pool),
speaker id, and emotion class.  Frame features concatenate
[symbol embedding ‖ speaker embedding ‖ pitch(t) ‖ intensity(t) ‖ emotion
embedding] and are pushed through a fixed random mixing network — a linear
skip plus tanh branches — per layer, with Gaussian noise on top.  The linear
skip keeps every factor linearly decodable from the mixed states, so probes
on raw features act as the entangled baseline.

Two generator switches support targeted checks:

* ``planted_cues`` — emotion is re-expressed as (cue word, contour spike):
  classes with e >= emotion_count/2 carry one polar cue word in the
  transcript, and every class signs a sharp spike planted in both contours
  by its parity.  The emotion embedding is zeroed so those two routes are
  the only emotion evidence.
* ``text_layers`` — symbol embeddings are zeroed in every layer *not*
  listed, so only the listed layers carry transcription information.
"""

from __future__ import annotations

import string
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .ctc import Vocabulary
from .data import UtteranceRecord, WordTiming
from .optim import derive_seed

SYMBOL_DIM = 8
SPEAKER_DIM = 8
EMOTION_DIM = 4
CUE_POLARITY = 0.9
SPIKE_HEIGHT = 2.0


@dataclass(frozen=True)
class SynthConfig:
    utterance_count: int = 2000
    vocab_size: int = 8  # letters plus the word separator
    speaker_count: int = 8
    emotion_count: int = 4
    layer_count: int = 4
    width: int = 32
    frames_per_symbol: tuple[int, int] = (2, 4)
    transcript_pool: int = 64
    words_per_transcript: tuple[int, int] = (2, 4)
    word_length: tuple[int, int] = (1, 3)
    mixing_depth: int = 1
    noise_scale: float = 0.05
    frame_period: float = 0.02
    planted_cues: bool = False
    text_layers: tuple[int, ...] | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("utterance_count", "vocab_size", "speaker_count",
                     "emotion_count", "layer_count", "width",
                     "transcript_pool"):
            if getattr(self, name) < 2:
                raise ValueError(f"{name} must be >= 2, got {getattr(self, name)}")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")
        if self.mixing_depth < 0:
            raise ValueError("mixing_depth must be >= 0")
        for name in ("frames_per_symbol", "words_per_transcript", "word_length"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValueError(f"{name} must satisfy 1 <= lo <= hi, got ({lo}, {hi})")
        if self.vocab_size - 1 > len(string.ascii_lowercase):
            raise ValueError("vocab_size too large for letter alphabet")
        if self.frame_period <= 0:
            raise ValueError("frame_period must be positive")
        if self.text_layers is not None:
            for layer in self.text_layers:
                if not 0 <= layer < self.layer_count:
                    raise ValueError(f"text_layers entry {layer} out of range")


def synth_letters(config: SynthConfig) -> str:
    return string.ascii_lowercase[: config.vocab_size - 1]


def synth_vocabulary(config: SynthConfig) -> Vocabulary:
    """The corpus alphabet: letters plus space, blank in front."""
    return Vocabulary.from_characters(synth_letters(config) + " ")


def synth_lexicon(config: SynthConfig) -> dict[str, float]:
    """Polarity lexicon for the planted cue words (empty otherwise)."""
    if not config.planted_cues:
        return {}
    pos, neg = _cue_words(config)
    return {pos: CUE_POLARITY, neg: -CUE_POLARITY}


def _cue_words(config: SynthConfig) -> tuple[str, str]:
    letters = synth_letters(config)
    pos = letters[0] + letters[1 % len(letters)] + letters[0]
    neg = letters[-1] + letters[-2] + letters[-1]
    return pos, neg


def _sample_word(rng: np.random.Generator, letters: str, lo: int, hi: int,
                 forbidden: frozenset[str]) -> str:
    while True:
        length = int(rng.integers(lo, hi + 1))
        word = "".join(letters[i] for i in rng.integers(0, len(letters), length))
        if word not in forbidden:
            return word


def _transcript_pool(config: SynthConfig, rng: np.random.Generator) -> list[str]:
    letters = synth_letters(config)
    forbidden = frozenset(_cue_words(config))
    pool: list[str] = []
    seen: set[str] = set()
    wlo, whi = config.words_per_transcript
    llo, lhi = config.word_length
    while len(pool) < config.transcript_pool:
        count = int(rng.integers(wlo, whi + 1))
        words = [_sample_word(rng, letters, llo, lhi, forbidden) for _ in range(count)]
        transcript = " ".join(words)
        if transcript not in seen:
            seen.add(transcript)
            pool.append(transcript)
    return pool


@dataclass(frozen=True)
class _MixingNet:
    """Per-layer fixed random mixing: linear skip plus a tanh chain."""

    skips: tuple[np.ndarray, ...]      # layer -> [D, F]
    chains: tuple[tuple[np.ndarray, ...], ...]  # layer -> depth matrices

    def apply(self, features: np.ndarray, layer: int) -> np.ndarray:
        out = features @ self.skips[layer].T
        y = features
        for mat in self.chains[layer]:
            y = np.tanh(y @ mat.T)
        if self.chains[layer]:
            out = out + y
        return out


def _build_mixing(config: SynthConfig, rng: np.random.Generator,
                  feature_dim: int) -> _MixingNet:
    skips = []
    chains = []
    for _ in range(config.layer_count):
        skips.append(rng.normal(0.0, 1.0 / np.sqrt(feature_dim),
                                (config.width, feature_dim)))
        chain = []
        in_dim = feature_dim
        for _ in range(config.mixing_depth):
            chain.append(rng.normal(0.0, 1.0 / np.sqrt(in_dim),
                                    (config.width, in_dim)))
            in_dim = config.width
        chains.append(tuple(chain))
    return _MixingNet(tuple(skips), tuple(chains))


@dataclass(frozen=True)
class _FactorTables:
    symbol_emb: np.ndarray    # [vocab, SYMBOL_DIM]
    speaker_emb: np.ndarray   # [speakers, SPEAKER_DIM]
    emotion_emb: np.ndarray   # [emotions, EMOTION_DIM]
    pitch_base: np.ndarray    # per speaker
    intensity_base: np.ndarray
    pitch_offset: np.ndarray  # per emotion
    intensity_offset: np.ndarray
    pitch_amp: np.ndarray
    intensity_amp: np.ndarray
    pitch_freq: np.ndarray
    intensity_freq: np.ndarray


def _build_tables(config: SynthConfig, rng: np.random.Generator) -> _FactorTables:
    n_sym = config.vocab_size
    return _FactorTables(
        symbol_emb=rng.normal(0.0, 1.0, (n_sym, SYMBOL_DIM)),
        speaker_emb=rng.normal(0.0, 1.0, (config.speaker_count, SPEAKER_DIM)),
        emotion_emb=rng.normal(0.0, 1.0, (config.emotion_count, EMOTION_DIM)),
        pitch_base=rng.uniform(-1.0, 1.0, config.speaker_count),
        intensity_base=rng.uniform(-1.0, 1.0, config.speaker_count),
        pitch_offset=rng.uniform(-0.8, 0.8, config.emotion_count),
        intensity_offset=rng.uniform(-0.8, 0.8, config.emotion_count),
        pitch_amp=rng.uniform(0.3, 1.0, config.emotion_count),
        intensity_amp=rng.uniform(0.3, 1.0, config.emotion_count),
        pitch_freq=rng.uniform(1.0, 3.0, config.emotion_count),
        intensity_freq=rng.uniform(1.0, 3.0, config.emotion_count),
    )


def _smooth_wiggle(rng: np.random.Generator, frames: int, amplitude: float) -> np.ndarray:
    raw = rng.normal(0.0, 1.0, frames)
    kernel = np.ones(5) / 5.0
    return amplitude * np.convolve(raw, kernel, mode="same")


def _natural_contour(rng: np.random.Generator, frames: int, base: float,
                     offset: float, amp: float, freq: float) -> np.ndarray:
    phase = rng.uniform(0.0, 2.0 * np.pi)
    t = np.arange(frames) / max(frames, 1)
    contour = base + offset + amp * np.sin(2.0 * np.pi * freq * t + phase)
    return contour + _smooth_wiggle(rng, frames, 0.05)


def _spiked_contour(rng: np.random.Generator, frames: int, base: float,
                    sign: float, spike_frame: int) -> np.ndarray:
    slope = rng.uniform(-0.5, 0.5)
    t = np.arange(frames) / max(frames, 1)
    contour = base + slope * t + _smooth_wiggle(rng, frames, 0.03)
    contour[spike_frame] += sign * SPIKE_HEIGHT
    for neighbor in (spike_frame - 1, spike_frame + 1):
        if 0 <= neighbor < frames:
            contour[neighbor] += sign * SPIKE_HEIGHT * 0.4
    return contour


def _frames_for_symbols(rng: np.random.Generator, symbols: str,
                        lo: int, hi: int) -> list[int]:
    return [int(rng.integers(lo, hi + 1)) for _ in symbols]


def _word_timings(transcript: str, spans: list[int],
                  frame_period: float) -> list[WordTiming]:
    timings = []
    frame = 0
    pos = 0
    for word in transcript.split(" "):
        start_frame = frame
        for _ in word:
            frame += spans[pos]
            pos += 1
        timings.append(WordTiming(word, start_frame * frame_period, frame * frame_period))
        if pos < len(spans):  # consume the separating space
            frame += spans[pos]
            pos += 1
    return timings


def synth_generate(config: SynthConfig) -> list[UtteranceRecord]:
    """Generate the corpus with inline hidden states and full ground truth."""
    letters = synth_letters(config)
    tables = _build_tables(config, np.random.default_rng(derive_seed(config.seed, "tables")))
    pool = _transcript_pool(config, np.random.default_rng(derive_seed(config.seed, "pool")))
    feature_dim = SYMBOL_DIM + SPEAKER_DIM + 2 + EMOTION_DIM
    mixing = _build_mixing(
        config, np.random.default_rng(derive_seed(config.seed, "mixing")), feature_dim
    )
    symbol_index = {sym: i for i, sym in enumerate(letters + " ")}
    cue_pos, cue_neg = _cue_words(config)

    records = []
    for utt in range(config.utterance_count):
        rng = np.random.default_rng(derive_seed(config.seed, "utterance", utt))
        speaker = int(rng.integers(0, config.speaker_count))
        emotion = int(rng.integers(0, config.emotion_count))
        transcript = pool[int(rng.integers(0, len(pool)))]

        if config.planted_cues and emotion >= config.emotion_count // 2:
            words = transcript.split(" ")
            cue = cue_pos if rng.random() < 0.5 else cue_neg
            words.insert(int(rng.integers(0, len(words) + 1)), cue)
            transcript = " ".join(words)

        spans = _frames_for_symbols(rng, transcript, *config.frames_per_symbol)
        frames = sum(spans)
        timings = _word_timings(transcript, spans, config.frame_period)

        if config.planted_cues:
            spike_sign = 1.0 if emotion % 2 == 0 else -1.0
            spike_frame = int(rng.integers(2, max(3, frames - 2)))
            pitch = _spiked_contour(rng, frames, tables.pitch_base[speaker],
                                    spike_sign, spike_frame)
            intensity = _spiked_contour(rng, frames, tables.intensity_base[speaker],
                                        spike_sign, spike_frame)
        else:
            pitch = _natural_contour(rng, frames, tables.pitch_base[speaker],
                                     tables.pitch_offset[emotion],
                                     tables.pitch_amp[emotion],
                                     tables.pitch_freq[emotion])
            intensity = _natural_contour(rng, frames, tables.intensity_base[speaker],
                                         tables.intensity_offset[emotion],
                                         tables.intensity_amp[emotion],
                                         tables.intensity_freq[emotion])

        features = np.zeros((frames, feature_dim))
        frame = 0
        for sym, span in zip(transcript, spans):
            features[frame:frame + span, :SYMBOL_DIM] = tables.symbol_emb[symbol_index[sym]]
            frame += span
        features[:, SYMBOL_DIM:SYMBOL_DIM + SPEAKER_DIM] = tables.speaker_emb[speaker]
        features[:, SYMBOL_DIM + SPEAKER_DIM] = pitch
        features[:, SYMBOL_DIM + SPEAKER_DIM + 1] = intensity
        if not config.planted_cues:
            features[:, SYMBOL_DIM + SPEAKER_DIM + 2:] = tables.emotion_emb[emotion]

        hidden = np.zeros((config.layer_count, frames, config.width), dtype=np.float32)
        for layer in range(config.layer_count):
            layer_features = features
            if config.text_layers is not None and layer not in config.text_layers:
                layer_features = features.copy()
                layer_features[:, :SYMBOL_DIM] = 0.0
            mixed = mixing.apply(layer_features, layer)
            mixed = mixed + rng.normal(0.0, config.noise_scale, mixed.shape)
            hidden[layer] = mixed.astype(np.float32)

        records.append(UtteranceRecord(
            id=f"synth-{utt:05d}",
            transcript=transcript,
            duration=frames * config.frame_period,
            labels={"speaker": speaker, "emotion": emotion, "gender": speaker % 2},
            hidden=hidden,
            frame_series={"pitch": pitch, "intensity": intensity},
            word_timings=timings,
            frames=frames,
        ))
    return records


def onehot_corpus(count: int, config: SynthConfig | None = None,
                  seed: int = 0) -> tuple[list[UtteranceRecord], Vocabulary]:
    """Degenerate corpus whose frames are one-hot symbol indicators.

    Single layer, width = vocabulary size; transcription is separable by
    construction, so a bottleneck of width vocab+1 should drive word error
    toward zero within a few epochs.
    """
    config = config or SynthConfig(utterance_count=max(count, 2))
    letters = synth_letters(config)
    vocab = synth_vocabulary(config)
    records = []
    for utt in range(count):
        rng = np.random.default_rng(derive_seed(seed, "onehot", utt))
        length = int(rng.integers(3, 7))
        # no adjacent repeats: identical consecutive frames make the blank
        # separator unreachable for a deterministic per-frame decoder
        chars: list[str] = []
        while len(chars) < length:
            char = letters[int(rng.integers(0, len(letters)))]
            if not chars or chars[-1] != char:
                chars.append(char)
        transcript = "".join(chars)
        spans = _frames_for_symbols(rng, transcript, *config.frames_per_symbol)
        frames = sum(spans)
        hidden = np.zeros((1, frames, config.vocab_size), dtype=np.float32)
        frame = 0
        for sym, span in zip(transcript, spans):
            hidden[0, frame:frame + span, letters.index(sym)] = 1.0
            frame += span
        records.append(UtteranceRecord(
            id=f"onehot-{utt:05d}",
            transcript=transcript,
            duration=frames * config.frame_period,
            labels={},
            hidden=hidden,
            frames=frames,
        ))
    return records, vocab
