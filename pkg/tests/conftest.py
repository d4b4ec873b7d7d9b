import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_ensemble(rng, m, n, k=5):
    from kronshampoo.models import GradientEnsemble

    return GradientEnsemble.weighted(rng.standard_normal((k, m, n)), rng.random(k) + 0.1)


def random_spd(rng, d, floor=0.1):
    A = rng.standard_normal((d, d))
    return A @ A.T + floor * np.eye(d)
