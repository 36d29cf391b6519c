import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from induced_spectrum.circle_measures import AtomicMeasure, CircleMeasure

settings.register_profile(
    "repo",
    derandomize=True,
    deadline=None,
    max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repo")


def random_measure(rng: np.random.Generator, P: int, atoms: int = 6) -> CircleMeasure:
    """A positive measure: a few weighted atoms plus an absolutely continuous part."""
    pos = rng.uniform(0, 2 * np.pi, atoms)
    w = rng.uniform(0, 1, atoms)
    m = AtomicMeasure(pos, w).coefficients(P)
    smooth = np.zeros(P + 1, dtype=complex)
    smooth[0] = rng.uniform(0, 1)
    return m + CircleMeasure(smooth)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
