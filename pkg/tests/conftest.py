import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_bits(rng, length, n_inputs, p=0.5):
    return (rng.random((length, n_inputs)) < p).astype(np.uint8)


def random_labels(rng, length, n_labels):
    return rng.integers(0, n_labels, size=length)
