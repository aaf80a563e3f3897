import numpy as np
import pytest
import torch

from exprcl.synthetic import generate_corpus

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_corpus():
    """4 identities x 2 videos x 4 s at 5 fps: 160 frames with labels."""
    return generate_corpus(4, 2, 4.0, 5.0, 0.15, seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
