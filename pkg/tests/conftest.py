import copy

import numpy as np
import pytest

from mmrl.data import generate_corpus
from mmrl.encoder import DualEncoder, EncoderDims, pretrain_surrogate
from mmrl.evaluation import adapt, base_novel_split
from mmrl.training import TrainConfig

PRETRAIN_STEPS = 150


@pytest.fixture(scope="session")
def corpus():
    return generate_corpus(seed=0)


@pytest.fixture(scope="session")
def backbone(corpus):
    """Pretrained, frozen surrogate shared by the whole session."""
    return pretrain_surrogate(corpus, steps=PRETRAIN_STEPS, seed=0)


@pytest.fixture(scope="session")
def random_backbone():
    return DualEncoder(EncoderDims(), seed=0).freeze()


@pytest.fixture(scope="session")
def split(corpus):
    return base_novel_split(corpus.num_classes, 0)


@pytest.fixture(scope="session")
def _trained(corpus, backbone, split):
    return adapt(corpus, backbone, split, TrainConfig(epochs=5), shots=16)


@pytest.fixture
def trained(_trained):
    """(state, result, train indices); the state is a private copy."""
    state, result, idx = _trained
    return copy.deepcopy(state), result, idx


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
