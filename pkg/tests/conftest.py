import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from regjacobi.problem import BlockPartition, QuadraticObjective
from regjacobi.sets import Box

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def quad(Q, q, sizes=None):
    Q = np.asarray(Q, dtype=float)
    sizes = (1,) * Q.shape[0] if sizes is None else sizes
    return QuadraticObjective(Q, q, BlockPartition(tuple(sizes)))


def boxes(n, lo, hi):
    return [Box([lo], [hi]) for _ in range(n)]


@pytest.fixture
def toy():
    """``Q = I_2``, ``q = (-2, -2)`` on ``[0, 10]^2``; minimizer ``(1, 1)``."""
    return quad(np.eye(2), [-2.0, -2.0]), boxes(2, 0.0, 10.0)
