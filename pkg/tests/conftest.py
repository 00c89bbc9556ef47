"""Shared fixtures: one tiny corpus and one cheaply trained model pair.

Session scope keeps the expensive pieces (training runs) to a single
execution; every test treats them as frozen.
"""

import numpy as np
import pytest
import torch

torch.set_num_threads(2)

from vibsplit.stage1 import Stage1Config, train_stage1
from vibsplit.stage2 import Stage2Config, train_stage2
from vibsplit.synth import SynthConfig, synth_generate, synth_vocabulary


@pytest.fixture(scope="session")
def small_corpus():
    """60 utterances with full ground truth, plus vocabulary and config."""
    config = SynthConfig(utterance_count=60, seed=5)
    return synth_generate(config), synth_vocabulary(config), config


@pytest.fixture(scope="session")
def planted_corpus():
    """Cue-word corpus used by the attribution tests."""
    config = SynthConfig(utterance_count=50, planted_cues=True, seed=11)
    return synth_generate(config), synth_vocabulary(config), config


@pytest.fixture(scope="session")
def tiny_models(small_corpus):
    """A briefly trained stage-1/stage-2 pair over the small corpus.

    Three epochs is far too little to reach useful accuracy; these models
    exist to exercise shapes, freezing, and serialization, not metrics.
    """
    records, vocab, _ = small_corpus
    stage1 = train_stage1(records, vocab, Stage1Config(epochs=3, seed=1))
    stage2 = train_stage2(records, stage1,
                          Stage2Config(task="emotion", epochs=3, seed=1))
    return stage1, stage2


@pytest.fixture
def rng():
    return np.random.default_rng(0)
