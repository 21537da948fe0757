import numpy as np
import pytest

from triflow import model as M


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_weights():
    return M.Weights.init(M.ModelConfig.tiny(8), seed=42)


@pytest.fixture(scope="session")
def toy_weights():
    # D_c = 64 model shared by model/pipeline tests; never mutated
    return M.Weights.init(M.ModelConfig.paired(64, encoder_channels=(16, 32, 64), iters=3), seed=42)


def random_frames(rng, h, w, n=3):
    return [rng.random((3, h, w), dtype=np.float32) for _ in range(n)]
