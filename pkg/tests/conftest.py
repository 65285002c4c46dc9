import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

# Property suites are seed-driven; "full" runs the 100-seed sweeps the
# acceptance gate expects, "fast" is for quick local iteration.
settings.register_profile(
    "full",
    max_examples=100,
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.register_profile(
    "fast",
    max_examples=10,
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile(os.environ.get("ADASFM_TEST_PROFILE", "full"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
