"""Acoustic frame features and word-to-frame alignment.

Extraction here is a reference implementation for waveform input; corpora
that ship precomputed pitch/intensity series in their manifests bypass it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DB_FLOOR = -80.0
VOICING_THRESHOLD = 0.5


@dataclass
class FrameSeries:
    """Per-frame scalar track; name is 'pitch' or 'intensity'."""

    values: np.ndarray
    name: str
    units: str

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("frame series must be one-dimensional")

    def __len__(self) -> int:
        return len(self.values)


def _frame_starts(n_samples: int, frame_length: int, hop: int) -> range:
    if n_samples < frame_length:
        return range(0)
    return range(0, n_samples - frame_length + 1, hop)


def rms_intensity(waveform: np.ndarray, frame_length: int = 1024,
                  hop: int = 256) -> FrameSeries:
    """Log root-mean-square energy per frame, in dB, floor-clamped.

    A doubling of amplitude raises the series by 20*log10(2) ~ 6.02 dB.
    """
    waveform = np.asarray(waveform, dtype=np.float64)
    if waveform.size == 0:
        raise ValueError("waveform is empty")
    if hop <= 0:
        raise ValueError("hop must be positive")
    if frame_length < hop:
        raise ValueError("frame_length must be >= hop")
    floor_rms = 10.0 ** (DB_FLOOR / 20.0)
    values = []
    for start in _frame_starts(len(waveform), frame_length, hop):
        frame = waveform[start:start + frame_length]
        rms = math.sqrt(float(np.mean(frame * frame)))
        values.append(20.0 * math.log10(max(rms, floor_rms)))
    return FrameSeries(np.asarray(values), name="intensity", units="dB")


def autocorr_pitch(waveform: np.ndarray, sample_rate: float,
                   band: tuple[float, float] = (60.0, 400.0),
                   frame_length: int = 1024, hop: int = 256) -> FrameSeries:
    """Fundamental-frequency track via normalized autocorrelation.

    The strongest normalized-autocorrelation peak within the lag band is
    refined by parabolic interpolation; frames whose peak falls below the
    voicing threshold are marked 0 (unvoiced).
    """
    waveform = np.asarray(waveform, dtype=np.float64)
    if waveform.size == 0:
        raise ValueError("waveform is empty")
    fmin, fmax = band
    if not 0.0 < fmin < fmax or fmax > sample_rate / 2.0:
        raise ValueError(f"band {band} invalid for sample rate {sample_rate}")
    lag_min = max(int(sample_rate / fmax), 1)
    lag_max = int(sample_rate / fmin)
    if lag_max >= frame_length:
        raise ValueError("frame_length too short for the requested band")
    values = []
    for start in _frame_starts(len(waveform), frame_length, hop):
        frame = waveform[start:start + frame_length]
        frame = frame - frame.mean()
        energy = float(np.dot(frame, frame))
        if energy <= 0.0:
            values.append(0.0)
            continue
        corr = np.correlate(frame, frame, mode="full")[frame_length - 1:]
        corr = corr / energy
        window = corr[lag_min:lag_max + 1]
        peak = int(np.argmax(window)) + lag_min
        if corr[peak] < VOICING_THRESHOLD:
            values.append(0.0)
            continue
        lag = float(peak)
        if 0 < peak < len(corr) - 1:
            left, mid, right = corr[peak - 1], corr[peak], corr[peak + 1]
            denom = left - 2.0 * mid + right
            if abs(denom) > 1e-12:
                lag = peak + 0.5 * (left - right) / denom
        values.append(sample_rate / lag)
    return FrameSeries(np.asarray(values), name="pitch", units="Hz")


def boundary_frame(time: float, total_time: float, frame_count: int) -> int:
    """Ceiling mapping of a time to its boundary frame index.

    A tiny slack is subtracted before the ceiling so products that land a
    float ulp above an integer do not jump a frame.
    """
    return max(math.ceil(time / total_time * frame_count - 1e-9), 0)


def align_words_to_frames(
    word_timings, total_time: float, frame_count: int
) -> list[tuple[str, int, int]]:
    """Map word (start, end) times onto frame indices via the ceiling rule.

    Both boundaries use frame = ceil(t / total_time * frame_count); a start
    of 0 lands on frame 0. Adjacent words sharing a time boundary share the
    boundary frame index.
    """
    if total_time <= 0 or frame_count < 1:
        raise ValueError("total_time must be positive and frame_count >= 1")
    aligned = []
    for word, start, end in word_timings:
        if not 0.0 <= start < end <= total_time + 1e-9:
            raise ValueError(
                f"word {word!r} timing [{start}, {end}] outside [0, {total_time}]"
            )
        aligned.append((
            word,
            boundary_frame(start, total_time, frame_count),
            boundary_frame(end, total_time, frame_count),
        ))
    return aligned
