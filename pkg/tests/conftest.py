import numpy as np
import pytest

from sslm import encoder as enc
from sslm import tokenizer as tok


@pytest.fixture(scope="session")
def toy_corpus():
    words = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta"]
    return [" ".join([words[i % len(words)]] * 6) for i in range(50)]


@pytest.fixture(scope="session")
def toy_vocab(toy_corpus):
    return tok.build_vocab(toy_corpus, target_size=60)


@pytest.fixture(scope="session")
def tiny_config(toy_vocab):
    return enc.EncoderConfig(
        n_layers=2, hidden_size=32, n_heads=2, ff_size=64,
        vocab_size=len(toy_vocab), max_positions=16,
    )


@pytest.fixture(scope="session")
def tiny_checkpoint(tiny_config):
    return enc.Checkpoint(config=tiny_config, parameters=enc.init_parameters(tiny_config, seed=0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
