"""Saliency scores, frame evidence channels, and their agreement."""

import csv
import io
import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from vibsplit.attribution import (
    AttributionResult,
    FrameFeatureVector,
    agreement,
    detect_extrema,
    ig_scores_for_record,
    integrated_gradients,
    load_lexicon,
    mean_agreement,
    polarity_frames,
    raw_state_classifier,
    record_features,
    run_attribution,
    save_lexicon,
    textual_attention_scores,
    uniform_scores,
)
from vibsplit.data import UtteranceRecord, WordTiming, split_corpus
from vibsplit.features import FrameSeries
from vibsplit.probing import ProbeConfig
from vibsplit.stage1 import Stage1Config, train_stage1
from vibsplit.stage2 import Stage2Config, train_stage2
from vibsplit.synth import (
    SynthConfig,
    synth_generate,
    synth_lexicon,
    synth_vocabulary,
)


class TestDetectExtrema:
    def test_monotone_ramp_has_no_extrema(self):
        flags = detect_extrema(np.arange(8.0))
        assert not flags.any()

    def test_triangular_peak_flagged_at_apex(self):
        flags = detect_extrema(np.array([0.0, 1, 2, 3, 2, 1, 0]))
        assert flags.tolist() == [0, 0, 0, 1, 0, 0, 0]

    def test_valley_flagged(self):
        flags = detect_extrema(np.array([3.0, 2, 1, 2, 3]), window=3)
        assert flags.tolist() == [0, 0, 1, 0, 0]

    def test_prominence_gates_small_peak(self):
        series = np.array([0.0, 10, 0, 0, 1, 0])
        flags = detect_extrema(series, window=3, prominence=0.2)
        assert flags.tolist() == [0, 1, 0, 0, 0, 0]

    def test_plateau_is_not_strict(self):
        flags = detect_extrema(np.array([0.0, 1, 1, 1, 0]), window=3)
        assert not flags.any()

    def test_edges_never_flagged(self, rng):
        series = rng.normal(size=30)
        flags = detect_extrema(series, window=5)
        assert not flags[:2].any() and not flags[-2:].any()

    def test_constant_series_has_no_range(self):
        assert not detect_extrema(np.full(9, 2.5)).any()

    def test_short_series_warns_and_returns_zeros(self):
        with pytest.warns(UserWarning, match="shorter than window"):
            flags = detect_extrema(np.array([0.0, 5, 0]), window=5)
        assert flags.tolist() == [0, 0, 0]

    def test_accepts_frame_series(self):
        series = FrameSeries([0.0, 1, 2, 3, 2, 1, 0], name="pitch", units="Hz")
        assert detect_extrema(series).sum() == 1

    def test_window_must_be_odd_and_wide_enough(self):
        for window in (4, 1, 2):
            with pytest.raises(ValueError, match="odd"):
                detect_extrema(np.zeros(9), window=window)

    def test_prominence_must_be_a_fraction(self):
        for prominence in (0.0, 1.0, -0.5):
            with pytest.raises(ValueError, match="prominence"):
                detect_extrema(np.zeros(9), prominence=prominence)

    def test_valid_mask_excludes_frames(self):
        series = np.array([5.0, 0, 3, 0, 5])
        unmasked = detect_extrema(series, window=3)
        assert unmasked.tolist() == [0, 1, 1, 1, 0]
        masked = detect_extrema(series, window=3,
                                valid=np.array([1, 0, 1, 0, 1], dtype=bool))
        assert not masked.any()

    def test_valid_mask_shape_checked(self):
        with pytest.raises(ValueError, match="valid mask"):
            detect_extrema(np.zeros(6), valid=np.ones(5, dtype=bool))


class TestPolarityFrames:
    TIMINGS = [WordTiming("good", 0.0, 0.5), WordTiming("day", 0.5, 1.0)]

    def test_neutral_words_give_zero_vector(self):
        out = polarity_frames(self.TIMINGS, {}, 1.0, 10)
        assert out.tolist() == [0.0] * 10

    def test_polar_word_covers_its_frames_with_magnitude(self):
        out = polarity_frames(self.TIMINGS, {"good": -0.8}, 1.0, 10)
        assert out.tolist() == [0.8] * 6 + [0.0] * 4

    def test_overlap_keeps_the_larger_magnitude(self):
        timings = [WordTiming("aba", 0.0, 0.4), WordTiming("gfg", 0.4, 1.0)]
        out = polarity_frames(timings, {"aba": 0.5, "gfg": -0.9}, 1.0, 10)
        assert out.tolist() == [0.5] * 4 + [0.9] * 6

    def test_word_ending_at_total_time_stays_in_bounds(self):
        out = polarity_frames([WordTiming("gfg", 0.6, 1.0)], {"gfg": 0.9}, 1.0, 5)
        assert len(out) == 5 and out[-1] == 0.9


class TestFrameFeatureVector:
    def test_rejects_values_outside_unit_interval(self):
        with pytest.raises(ValueError, match="polarity"):
            FrameFeatureVector(None, None, np.array([0.2, 1.5]))

    def test_items_skips_missing_channels(self):
        features = FrameFeatureVector(None, np.array([0.0, 1.0]), None)
        assert [name for name, _ in features.items()] == ["pitch_extremum"]


class TestRecordFeatures:
    def test_synthetic_record_has_all_channels(self, planted_corpus):
        records, _, config = planted_corpus
        features = record_features(records[0], synth_lexicon(config))
        names = [name for name, _ in features.items()]
        assert names == ["intensity_extremum", "pitch_extremum", "polarity"]
        for _, values in features.items():
            assert len(values) == records[0].frames

    def test_missing_timings_warn_and_omit_polarity(self, planted_corpus):
        records, _, config = planted_corpus
        stripped = replace(records[0], word_timings=None)
        with pytest.warns(UserWarning, match="no word timings"):
            features = record_features(stripped, synth_lexicon(config))
        assert features.polarity is None

    def test_unvoiced_pitch_frames_are_not_extrema(self):
        pitch = np.array([200.0, 220, 0, 210, 205])
        record = UtteranceRecord(
            id="u", transcript="w", duration=1.0, labels={},
            hidden=np.zeros((1, 5, 2), dtype=np.float32),
            frame_series={"pitch": pitch, "intensity": np.full(5, -20.0)},
            word_timings=[WordTiming("w", 0.0, 1.0)], frames=5,
        )
        features = record_features(record, {})
        assert not features.pitch_extremum.any()
        # without the voicing mask the dropout frame reads as a deep valley
        assert detect_extrema(pitch).tolist() == [0, 0, 1, 0, 0]


class TestIntegratedGradients:
    def test_linear_classifier_is_exact_at_any_step_count(self, rng):
        frames = rng.normal(size=(6, 4))
        weights = torch.tensor(rng.normal(size=(6, 4)))
        expected = (frames * weights.numpy()).sum(axis=1)
        for steps in (1, 7):
            result = integrated_gradients(lambda x: (x * weights).sum(),
                                          frames, steps=steps)
            assert result.signed == pytest.approx(expected, rel=1e-12)
            assert result.completeness_gap < 1e-10

    def test_custom_baseline_shifts_the_path(self, rng):
        frames = rng.normal(size=(5, 3))
        baseline = rng.normal(size=(5, 3))
        weights = torch.tensor(rng.normal(size=(5, 3)))
        result = integrated_gradients(lambda x: (x * weights).sum(),
                                      frames, steps=2, baseline=baseline)
        expected = ((frames - baseline) * weights.numpy()).sum(axis=1)
        assert result.signed == pytest.approx(expected, rel=1e-12)

    def test_completeness_on_a_nonlinear_classifier(self, rng):
        mix = torch.tensor(rng.normal(size=(4, 8)))
        readout = torch.tensor(rng.normal(size=8))
        frames = rng.normal(size=(7, 4))

        def logit_fn(x):
            return (torch.tanh(x @ mix) @ readout).sum()

        result = integrated_gradients(logit_fn, frames, steps=256)
        assert abs(result.prediction_delta) > 0.05
        assert result.completeness_gap <= 0.01 * abs(result.prediction_delta)

    def test_scores_form_a_distribution(self, rng):
        mix = torch.tensor(rng.normal(size=(3, 5)))
        result = integrated_gradients(lambda x: torch.tanh(x @ mix).sum(),
                                      rng.normal(size=(9, 3)), steps=8)
        assert (result.scores >= 0).all()
        assert result.scores.sum() == pytest.approx(1.0, abs=1e-12)

    def test_zero_attribution_falls_back_to_uniform(self):
        with pytest.warns(UserWarning, match="falling back to uniform"):
            result = integrated_gradients(lambda x: x.sum(), np.zeros((4, 2)))
        assert result.scores.tolist() == [0.25] * 4

    def test_step_count_validated(self):
        with pytest.raises(ValueError, match="steps"):
            integrated_gradients(lambda x: x.sum(), np.zeros((3, 2)), steps=0)

    def test_baseline_shape_validated(self):
        with pytest.raises(ValueError, match="baseline"):
            integrated_gradients(lambda x: x.sum(), np.zeros((3, 2)),
                                 baseline=np.zeros((2, 2)))

    def test_scalar_output_enforced(self):
        with pytest.raises(ValueError, match="scalar"):
            integrated_gradients(lambda x: x.sum(dim=1), np.ones((3, 2)))


class TestAgreement:
    def test_uniform_scores_give_the_feature_mean(self, rng):
        flags = (rng.random(7) < 0.4).astype(float)
        features = FrameFeatureVector(flags, None, None)
        value = agreement(uniform_scores(7), features)["intensity_extremum"]
        assert value == pytest.approx(flags.mean(), rel=1e-12)

    def test_concentrated_scores_hit_their_frame(self):
        scores = np.array([0.0, 0, 1, 0])
        features = FrameFeatureVector(np.array([0.0, 0, 1, 0]), None, None)
        assert agreement(scores, features)["intensity_extremum"] == 1.0

    def test_all_ones_feature_gives_one(self, rng):
        raw = rng.random(11)
        features = FrameFeatureVector(None, np.ones(11), None)
        value = agreement(raw / raw.sum(), features)["pitch_extremum"]
        assert value == pytest.approx(1.0, abs=1e-12)

    def test_length_mismatch_raises(self):
        features = FrameFeatureVector(np.zeros(3), None, None)
        with pytest.raises(ValueError, match="frames"):
            agreement(uniform_scores(4), features)

    def test_missing_channels_are_omitted(self):
        features = FrameFeatureVector(None, None, np.array([0.5, 0.5]))
        assert set(agreement(uniform_scores(2), features)) == {"polarity"}

    def test_mean_agreement_averages_per_channel(self):
        scores = [np.array([1.0, 0]), np.array([0.0, 1])]
        features = [
            FrameFeatureVector(np.array([1.0, 0]), None, np.array([0.0, 0])),
            FrameFeatureVector(np.array([0.0, 0]), None, None),
        ]
        table = mean_agreement(scores, features)
        assert table["intensity_extremum"] == pytest.approx(0.5)
        # polarity exists on one record only; averaged over that one
        assert table["polarity"] == 0.0


class TestUniformScores:
    def test_equal_mass_summing_to_one(self):
        scores = uniform_scores(4)
        assert scores.tolist() == [0.25] * 4


def _handmade_result() -> AttributionResult:
    features = FrameFeatureVector(
        np.array([0.0, 1, 0, 0]),
        np.array([0.0, 0, 1, 0]),
        np.array([0.9, 0.9, 0, 0]),
    )
    return AttributionResult(
        record_id="utt-3",
        acoustic_attention=np.array([0.1, 0.2, 0.3, 0.4]),
        textual_attention=np.array([0.4, 0.3, 0.2, 0.1]),
        ig=np.array([0.25, 0.25, 0.25, 0.25]),
        features=features,
    )


class TestExports:
    def test_score_vectors_include_the_uniform_baseline(self):
        vectors = _handmade_result().score_vectors()
        assert set(vectors) == {"acoustic_attention", "textual_attention",
                                "ig", "uniform"}
        assert vectors["uniform"].tolist() == [0.25] * 4

    def test_csv_layout(self):
        rows = list(csv.reader(io.StringIO(_handmade_result().to_csv())))
        assert rows[0] == ["frame", "acoustic_attention", "textual_attention",
                           "ig", "uniform", "intensity_extremum",
                           "pitch_extremum", "polarity"]
        assert len(rows) == 5
        assert float(rows[1][1]) == pytest.approx(0.1)
        assert float(rows[2][7]) == pytest.approx(0.9)

    def test_json_round_trip(self):
        payload = json.loads(_handmade_result().to_json())
        assert payload["record_id"] == "utt-3"
        assert payload["scores"]["acoustic_attention"] == [0.1, 0.2, 0.3, 0.4]
        assert payload["features"]["polarity"] == [0.9, 0.9, 0, 0]


class TestLexiconIO:
    def test_round_trip(self, tmp_path):
        lexicon = {"aba": 0.9, "gfg": -0.9, "dull": 0.0}
        path = tmp_path / "lex.tsv"
        save_lexicon(lexicon, path)
        assert load_lexicon(path) == lexicon

    def test_synthetic_lexicon_round_trips(self, planted_corpus, tmp_path):
        _, _, config = planted_corpus
        path = tmp_path / "lex.tsv"
        save_lexicon(synth_lexicon(config), path)
        assert load_lexicon(path) == synth_lexicon(config)

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "lex.tsv"
        path.write_text("aba\t0.9\n\ngfg\t-0.9\n")
        assert load_lexicon(path) == {"aba": 0.9, "gfg": -0.9}

    def test_malformed_line_reports_its_number(self, tmp_path):
        path = tmp_path / "lex.tsv"
        path.write_text("aba\t0.9\nno tab here\n")
        with pytest.raises(ValueError, match="line 2"):
            load_lexicon(path)

    def test_polarity_range_checked(self, tmp_path):
        path = tmp_path / "lex.tsv"
        path.write_text("aba\t1.5\n")
        with pytest.raises(ValueError, match="outside"):
            load_lexicon(path)


class TestScoreMechanics:
    """Shape/normalization behavior with cheap, barely trained models."""

    def test_textual_attention_weights_are_distributions(self, small_corpus,
                                                         tiny_models):
        records, _, _ = small_corpus
        stage1, _ = tiny_models
        weights, probe = textual_attention_scores(
            stage1, records[:6], "emotion", ProbeConfig(epochs=1, seed=3))
        assert len(weights) == 6
        for record, w in zip(records[:6], weights):
            assert w.shape == (record.frames,)
            assert w.sum() == pytest.approx(1.0, abs=1e-6)
            assert (w >= 0).all()

    def test_ig_completeness_for_the_raw_classifier(self, small_corpus):
        records, _, _ = small_corpus
        probe = raw_state_classifier(records[:6], "emotion",
                                     ProbeConfig(epochs=1, seed=3))
        result = ig_scores_for_record(probe, records[0], steps=256)
        assert result.scores.sum() == pytest.approx(1.0, abs=1e-6)
        assert result.completeness_gap <= 0.01 * abs(result.prediction_delta)

    def test_run_attribution_structure(self, planted_corpus, tiny_models):
        records, _, config = planted_corpus
        stage1, stage2 = tiny_models
        results, table = run_attribution(
            records, stage1, stage2, synth_lexicon(config),
            ProbeConfig(epochs=1, seed=3), ig_steps=2)
        assert [r.record_id for r in results] == [r.id for r in records]
        assert set(table) == {"acoustic_attention", "textual_attention",
                              "ig", "uniform"}
        channels = {"intensity_extremum", "pitch_extremum", "polarity"}
        for route, values in table.items():
            assert set(values) == channels
        for result in results:
            for scores in result.score_vectors().values():
                assert scores.sum() == pytest.approx(1.0, abs=1e-6)
                assert (scores >= 0).all()
        # the uniform row is just the mean of per-record feature means
        expected = np.mean([r.features.polarity.mean() for r in results])
        assert table["uniform"]["polarity"] == pytest.approx(expected, rel=1e-9)


@pytest.fixture(scope="module")
def planted_run():
    """A planted-cue corpus with models trained just long enough to focus."""
    config = SynthConfig(utterance_count=160, planted_cues=True, seed=13)
    records = synth_generate(config)
    train, _ = split_corpus(records, 0.2)
    stage1 = train_stage1(train, synth_vocabulary(config),
                          Stage1Config(epochs=6, seed=4))
    stage2 = train_stage2(train, stage1,
                          Stage2Config(task="emotion", epochs=6, seed=4))
    results, table = run_attribution(records, stage1, stage2,
                                     synth_lexicon(config),
                                     ProbeConfig(seed=21), ig_steps=4)
    return records, results, table


class TestPlantedCueOrdering:
    def test_acoustic_attention_tracks_planted_extrema(self, planted_run):
        _, _, table = planted_run
        acoustic, uniform = table["acoustic_attention"], table["uniform"]
        assert acoustic["intensity_extremum"] > uniform["intensity_extremum"]
        assert acoustic["pitch_extremum"] > uniform["pitch_extremum"]

    def test_textual_attention_tracks_polarity(self, planted_run):
        _, _, table = planted_run
        assert table["textual_attention"]["polarity"] > table["uniform"]["polarity"]

    def test_cue_words_draw_textual_attention(self, planted_run):
        records, results, _ = planted_run
        hits = total = 0
        for result in results:
            polar = result.features.polarity
            if not polar.any():
                continue
            total += 1
            attn = result.textual_attention
            hits += attn[polar != 0].mean() > attn.mean()
        assert total > 0
        assert hits / total >= 0.7

    def test_no_cue_attention_stays_near_uniform(self, planted_run):
        _, results, _ = planted_run
        ratios = [r.textual_attention.max() * len(r.textual_attention)
                  for r in results if not r.features.polarity.any()]
        assert len(ratios) > 0
        assert np.median(ratios) < 3.0
