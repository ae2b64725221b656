import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from nanohtnet.model import ModelConfig, init_params
from nanohtnet.skeleton import build_h36m17

settings.register_profile("lean", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("lean")

# reduced sizes used by the gradient checks
SMALL = ModelConfig(rf=8, t_k=4, channels=48, layers=1, heads=4)


@pytest.fixture
def topo():
    return build_h36m17()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg():
    return SMALL


@pytest.fixture
def small_params():
    return init_params(SMALL, seed=0, dtype=np.float64)
