import numpy as np
import pytest

from bendlab import BendSession, GenerationParams, build_toy_pipeline


@pytest.fixture()
def pipeline():
    return build_toy_pipeline(1)


@pytest.fixture()
def session(pipeline):
    return BendSession(pipeline)


@pytest.fixture()
def quick_params():
    """Small but real generation: 6 steps with CFG (two forwards per step)."""
    return GenerationParams(prompt="toy prompt", seed=7, steps=6, cfg=2.0)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def random_activation(rng, dtype=np.float32, max_side=8):
    b = int(rng.integers(1, 3))
    c = int(rng.integers(1, 4))
    h = int(rng.integers(1, max_side + 1))
    w = int(rng.integers(1, max_side + 1))
    return rng.standard_normal((b, c, h, w)).astype(dtype)
