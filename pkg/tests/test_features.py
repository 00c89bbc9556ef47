"""Acoustic feature extraction and the word-to-frame alignment rule."""

import math

import numpy as np
import pytest

from vibsplit.data import WordTiming
from vibsplit.features import (
    DB_FLOOR,
    FrameSeries,
    align_words_to_frames,
    autocorr_pitch,
    boundary_frame,
    rms_intensity,
)

RATE = 16000


def sine(freq: float, seconds: float = 1.0, amplitude: float = 0.5) -> np.ndarray:
    t = np.arange(int(RATE * seconds)) / RATE
    return amplitude * np.sin(2.0 * np.pi * freq * t)


class TestFrameSeries:
    def test_coerces_to_float64(self):
        series = FrameSeries([1, 2, 3], name="pitch", units="Hz")
        assert series.values.dtype == np.float64
        assert len(series) == 3

    def test_rejects_matrices(self):
        with pytest.raises(ValueError, match="one-dimensional"):
            FrameSeries(np.zeros((2, 2)), name="pitch", units="Hz")


class TestRmsIntensity:
    def test_frame_count(self):
        series = rms_intensity(np.ones(4096), frame_length=1024, hop=256)
        assert len(series) == (4096 - 1024) // 256 + 1
        assert series.name == "intensity"
        assert series.units == "dB"

    def test_constant_signal_exact_db(self):
        """RMS of a constant 0.5 signal is 0.5, i.e. 20*log10(0.5) dB."""
        series = rms_intensity(np.full(2048, 0.5))
        assert series.values == pytest.approx(20.0 * math.log10(0.5), rel=1e-12)

    def test_amplitude_doubling_adds_six_db(self):
        soft = rms_intensity(sine(220.0, amplitude=0.2))
        loud = rms_intensity(sine(220.0, amplitude=0.4))
        delta = loud.values - soft.values
        assert delta == pytest.approx(20.0 * math.log10(2.0), abs=1e-9)

    def test_steady_sine_is_near_constant(self):
        series = rms_intensity(sine(220.0))
        assert series.values.max() - series.values.min() < 0.1

    def test_silence_hits_the_floor(self):
        series = rms_intensity(np.zeros(4096))
        assert np.all(series.values == DB_FLOOR)

    def test_tiny_signal_clamped_to_floor(self):
        series = rms_intensity(np.full(2048, 1e-8))
        assert np.all(series.values == DB_FLOOR)

    def test_short_waveform_yields_empty_series(self):
        assert len(rms_intensity(np.ones(100), frame_length=1024)) == 0

    def test_validation(self):
        with pytest.raises(ValueError, match="empty"):
            rms_intensity(np.array([]))
        with pytest.raises(ValueError, match="hop"):
            rms_intensity(np.ones(2048), hop=0)
        with pytest.raises(ValueError, match="frame_length"):
            rms_intensity(np.ones(2048), frame_length=128, hop=256)


class TestAutocorrPitch:
    def test_pure_tone_recovered(self):
        series = autocorr_pitch(sine(220.0), RATE)
        voiced = series.values[series.values > 0]
        assert len(voiced) == len(series)  # a clean sine is voiced throughout
        assert np.all(np.abs(voiced - 220.0) < 2.0)

    def test_harmonic_does_not_hijack_the_fundamental(self):
        wave = sine(200.0) + 0.3 * sine(400.0)
        series = autocorr_pitch(wave, RATE)
        voiced = series.values[series.values > 0]
        assert np.all(np.abs(voiced - 200.0) < 2.0)

    def test_noise_is_mostly_unvoiced(self):
        noise = np.random.default_rng(0).normal(0.0, 1.0, RATE)
        series = autocorr_pitch(noise, RATE)
        assert np.mean(series.values == 0.0) > 0.5

    def test_silence_is_unvoiced(self):
        series = autocorr_pitch(np.zeros(4096), RATE)
        assert np.all(series.values == 0.0)

    def test_band_validation(self):
        wave = sine(220.0)
        with pytest.raises(ValueError, match="band"):
            autocorr_pitch(wave, RATE, band=(0.0, 400.0))
        with pytest.raises(ValueError, match="band"):
            autocorr_pitch(wave, RATE, band=(400.0, 60.0))
        with pytest.raises(ValueError, match="band"):
            autocorr_pitch(wave, RATE, band=(60.0, 9000.0))  # above Nyquist
        with pytest.raises(ValueError, match="frame_length"):
            autocorr_pitch(wave, RATE, band=(10.0, 400.0))  # lag exceeds frame

    def test_empty_waveform_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            autocorr_pitch(np.array([]), RATE)


class TestBoundaryFrame:
    def test_reference_vectors(self):
        assert boundary_frame(0.5, 2.0, 8) == 2
        assert boundary_frame(0.0, 2.0, 8) == 0
        assert boundary_frame(2.0, 2.0, 8) == 8
        assert boundary_frame(0.25, 1.0, 8) == 2
        assert boundary_frame(0.26, 1.0, 8) == 3  # 2.08 rounds up

    def test_ulp_above_integer_does_not_jump(self):
        """0.1 + 0.2 lands one ulp above 0.3; the slack keeps the product
        from ceiling up to frame 4."""
        assert boundary_frame(0.1 + 0.2, 1.0, 10) == 3

    def test_monotone_in_time(self):
        frames = [boundary_frame(t, 1.0, 50) for t in np.linspace(0.0, 1.0, 200)]
        assert frames == sorted(frames)
        assert frames[0] == 0
        assert frames[-1] == 50


class TestAlignWordsToFrames:
    def test_reference_alignment(self):
        aligned = align_words_to_frames([WordTiming("w", 0.5, 2.0)], 2.0, 8)
        assert aligned == [("w", 2, 8)]

    def test_start_zero_maps_to_frame_zero(self):
        aligned = align_words_to_frames([("a", 0.0, 1.0)], 2.0, 8)
        assert aligned == [("a", 0, 4)]

    def test_adjacent_words_share_the_boundary_frame(self):
        aligned = align_words_to_frames(
            [("a", 0.0, 1.0), ("b", 1.0, 2.0)], 2.0, 8)
        assert aligned[0][2] == aligned[1][1] == 4

    def test_plain_tuples_accepted(self):
        assert align_words_to_frames([("x", 0.0, 0.5)], 1.0, 4) == [("x", 0, 2)]

    def test_timing_validation(self):
        with pytest.raises(ValueError, match="timing"):
            align_words_to_frames([("w", -0.1, 0.5)], 1.0, 4)
        with pytest.raises(ValueError, match="timing"):
            align_words_to_frames([("w", 0.5, 0.5)], 1.0, 4)
        with pytest.raises(ValueError, match="timing"):
            align_words_to_frames([("w", 0.0, 1.5)], 1.0, 4)

    def test_frame_grid_validation(self):
        with pytest.raises(ValueError, match="total_time"):
            align_words_to_frames([("w", 0.0, 0.5)], 0.0, 4)
        with pytest.raises(ValueError, match="total_time"):
            align_words_to_frames([("w", 0.0, 0.5)], 1.0, 0)
