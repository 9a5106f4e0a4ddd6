import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "dceeg",
    deadline=None,
    max_examples=50,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("dceeg")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
