import numpy as np
import pytest

from dssd import CalibratedPairConfig, VocabConfig, calibrated_pair
from dssd.models import filtered, wire_grid_bits


def wire_exact_pair(alpha, seed=0, vocab=VocabConfig(256, 16), support=10, **kw):
    """Calibrated pair on the binary16/32 grid, filtered with top-k = support."""
    cfg = CalibratedPairConfig(alpha, vocab, seed=seed, support=support,
                               grid_bits=wire_grid_bits(vocab.b_prob), **kw)
    Mq, Mp = calibrated_pair(cfg)
    return filtered(Mq, support), filtered(Mp, support)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_vocab():
    return VocabConfig(256, 16)


@pytest.fixture(scope="session")
def pair61(small_vocab):
    return wire_exact_pair(0.61, seed=3, vocab=small_vocab)
