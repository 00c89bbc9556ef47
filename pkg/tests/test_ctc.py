"""CTC loss against analytic values and the path-enumeration oracle."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vibsplit.ctc import (
    InfeasibleTargetWarning,
    LogProbSequence,
    Vocabulary,
    brute_force_ctc,
    cer,
    collapse_path,
    ctc_loss,
    edit_distance,
    greedy_decode,
    min_frames_for_target,
    wer,
)


def random_logprobs(rng, frames, classes):
    raw = rng.normal(0, 1, (frames, classes))
    raw = raw - np.log(np.exp(raw).sum(axis=1, keepdims=True))
    return torch.tensor(raw, dtype=torch.float64)


class TestVocabulary:
    def test_encode_decode_round_trip(self):
        vocab = Vocabulary.from_characters("abc ")
        ids = vocab.encode("ab ca")
        assert vocab.decode(ids) == "ab ca"

    def test_unknown_symbol_rejected(self):
        vocab = Vocabulary.from_characters("ab")
        with pytest.raises(ValueError, match="not in vocabulary"):
            vocab.encode("abx")

    def test_decode_drops_blank(self):
        vocab = Vocabulary.from_characters("ab")
        assert vocab.decode([0, 1, 0, 2]) == "ab"

    def test_duplicate_symbols_rejected(self):
        with pytest.raises(ValueError, match="unique"):
            Vocabulary(symbols=("x", "a", "a"))

    def test_blank_index_range_checked(self):
        with pytest.raises(ValueError, match="blank_index"):
            Vocabulary(symbols=("a", "b"), blank_index=2)

    def test_save_load_round_trip(self, tmp_path):
        vocab = Vocabulary.from_characters("abcdefg ")
        path = tmp_path / "vocab.txt"
        vocab.save(path)
        assert Vocabulary.load(path) == vocab

    def test_size_counts_blank(self):
        assert Vocabulary.from_characters("ab").size == 3


class TestCollapse:
    def test_merges_repeats_then_drops_blanks(self):
        assert collapse_path([1, 1, 0, 1, 2, 2]) == (1, 1, 2)
        assert collapse_path([0, 0, 0]) == ()
        assert collapse_path([2, 0, 2]) == (2, 2)

    @settings(deadline=None)
    @given(st.lists(st.integers(0, 3), max_size=12))
    def test_output_never_contains_blank(self, path):
        collapsed = collapse_path(path, blank=0)
        assert 0 not in collapsed

    def test_min_frames(self):
        assert min_frames_for_target([]) == 0
        assert min_frames_for_target([1, 2, 3]) == 3
        assert min_frames_for_target([1, 1]) == 3
        assert min_frames_for_target([1, 1, 1]) == 5


class TestCtcLossAnalytic:
    def test_single_frame_single_symbol(self, rng):
        x = random_logprobs(rng, 1, 3)
        loss = ctc_loss(x, [2])
        assert loss.item() == pytest.approx(-x[0, 2].item(), rel=1e-12)

    def test_uniform_three_frames(self):
        # Of the 8 binary paths, exactly 6 collapse to (1): all but 000
        # and the split 101.
        x = torch.full((3, 2), math.log(0.5), dtype=torch.float64)
        loss = ctc_loss(x, [1])
        assert loss.item() == pytest.approx(-math.log(6 / 8), rel=1e-12)

    def test_repeat_needs_blank_between(self, rng):
        # Three frames emitting "1 1" leave a single path: 1, blank, 1.
        x = random_logprobs(rng, 3, 2)
        loss = ctc_loss(x, [1, 1])
        expected = -(x[0, 1] + x[1, 0] + x[2, 1]).item()
        assert loss.item() == pytest.approx(expected, rel=1e-12)

    def test_empty_target_is_all_blanks(self, rng):
        x = random_logprobs(rng, 4, 3)
        loss = ctc_loss(x, [])
        assert loss.item() == pytest.approx(-x[:, 0].sum().item(), rel=1e-12)

    def test_accepts_logprob_sequence_wrapper(self, rng):
        x = random_logprobs(rng, 3, 3)
        assert ctc_loss(LogProbSequence(x), [1]).item() == ctc_loss(x, [1]).item()


class TestCtcLossOracle:
    def test_agrees_with_enumeration_on_random_instances(self, rng):
        for _ in range(25):
            frames = int(rng.integers(1, 7))
            classes = int(rng.integers(2, 5))
            x = random_logprobs(rng, frames, classes)
            length = int(rng.integers(0, 4))
            target = [int(t) for t in rng.integers(1, classes, length)]
            expected = brute_force_ctc(x, target)
            if math.isinf(expected):
                with pytest.warns(InfeasibleTargetWarning):
                    got = ctc_loss(x, target)
                assert math.isinf(got.item())
            else:
                got = ctc_loss(x, target)
                assert got.item() == pytest.approx(expected, rel=1e-9)

    def test_enumeration_refuses_large_instances(self, rng):
        with pytest.raises(ValueError, match="enumeration bound"):
            brute_force_ctc(random_logprobs(rng, 7, 2), [1])
        with pytest.raises(ValueError, match="enumeration bound"):
            brute_force_ctc(random_logprobs(rng, 2, 5), [1])


class TestCtcLossValidation:
    def test_blank_in_target_rejected(self, rng):
        with pytest.raises(ValueError, match="blank"):
            ctc_loss(random_logprobs(rng, 3, 3), [0])

    def test_out_of_range_target_rejected(self, rng):
        with pytest.raises(ValueError, match="outside"):
            ctc_loss(random_logprobs(rng, 3, 3), [3])

    def test_non_matrix_input_rejected(self):
        with pytest.raises(ValueError, match="frames"):
            ctc_loss(torch.zeros(3), [1])

    def test_infeasible_target_warns_and_returns_inf(self, rng):
        x = random_logprobs(rng, 2, 3)
        with pytest.warns(InfeasibleTargetWarning):
            loss = ctc_loss(x, [1, 1])  # needs 3 frames
        assert math.isinf(loss.item())

    def test_unnormalized_rows_rejected_by_wrapper(self):
        with pytest.raises(ValueError, match="log-sum-exp"):
            LogProbSequence(torch.zeros(2, 3, dtype=torch.float64))


class TestCtcGradients:
    def test_gradcheck_small_instance(self, rng):
        x = random_logprobs(rng, 3, 3).requires_grad_(True)
        assert torch.autograd.gradcheck(
            lambda v: ctc_loss(v, [1, 2]), (x,), eps=1e-6, atol=1e-6
        )

    def test_gradcheck_with_repeat(self, rng):
        x = random_logprobs(rng, 4, 2).requires_grad_(True)
        assert torch.autograd.gradcheck(
            lambda v: ctc_loss(v, [1, 1]), (x,), eps=1e-6, atol=1e-6
        )

    def test_unreachable_target_gives_zero_gradient(self):
        # Feasible length, but the required symbol has zero probability.
        x = torch.full((2, 2), -math.inf, dtype=torch.float64)
        x[:, 0] = 0.0
        x.requires_grad_(True)
        loss = ctc_loss(x, [1])
        assert math.isinf(loss.item())
        loss.backward()
        assert torch.equal(x.grad, torch.zeros_like(x))


class TestDecoding:
    def test_greedy_best_path(self):
        vocab = Vocabulary.from_characters("ab")
        logits = np.log(np.array([
            [0.1, 0.8, 0.1],
            [0.1, 0.8, 0.1],
            [0.8, 0.1, 0.1],
            [0.1, 0.1, 0.8],
        ]))
        assert greedy_decode(logits, vocab) == "ab"

    def test_all_blank_decodes_empty(self):
        vocab = Vocabulary.from_characters("ab")
        logits = np.zeros((3, 3))
        logits[:, 0] = 5.0
        assert greedy_decode(logits, vocab) == ""


class TestEditDistance:
    def test_classic_vectors(self):
        assert edit_distance("kitten", "sitting") == 3
        assert edit_distance([], [1, 2]) == 2
        assert edit_distance("abc", "abc") == 0
        assert edit_distance("abc".split(), "abc".split()) == 0

    @settings(deadline=None)
    @given(st.lists(st.integers(0, 2), max_size=8),
           st.lists(st.integers(0, 2), max_size=8))
    def test_metric_properties(self, a, b):
        d = edit_distance(a, b)
        assert d == edit_distance(b, a)
        assert (d == 0) == (a == b)
        assert abs(len(a) - len(b)) <= d <= max(len(a), len(b))

    @settings(deadline=None, max_examples=50)
    @given(st.lists(st.integers(0, 1), max_size=6),
           st.lists(st.integers(0, 1), max_size=6),
           st.lists(st.integers(0, 1), max_size=6))
    def test_triangle_inequality(self, a, b, c):
        assert edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c)


class TestErrorRates:
    def test_wer_counts_words(self):
        assert wer("the cat sat", "the cat sat") == 0.0
        assert wer("the cat sat", "the dog sat") == pytest.approx(1 / 3)
        assert wer("a b", "a b c") == pytest.approx(1 / 2)

    def test_wer_accepts_token_lists(self):
        assert wer(["a", "b"], ["a"]) == pytest.approx(1 / 2)

    def test_cer_counts_characters(self):
        assert cer("abc", "axc") == pytest.approx(1 / 3)

    def test_empty_reference_rejected(self):
        with pytest.raises(ValueError):
            wer("", "a")
        with pytest.raises(ValueError):
            cer("", "a")
