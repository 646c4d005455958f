import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_cov(rng, p, m=None, jitter=0.1):
    m = p if m is None else m
    W = rng.standard_normal((p, m))
    return W @ W.T / m + jitter * np.eye(p)
