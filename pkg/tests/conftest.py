import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from twirls.graph import build_graph

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def random_graph(n, p, seed, connected=False):
    """Erdos-Renyi graph; with ``connected`` a random spanning path is added."""
    rng = np.random.default_rng(seed)
    iu, iv = np.triu_indices(n, 1)
    keep = rng.random(iu.size) < p
    edges = list(zip(iu[keep].tolist(), iv[keep].tolist()))
    if connected and n > 1:
        order = rng.permutation(n)
        edges += [(int(a), int(b)) for a, b in zip(order[:-1], order[1:])]
    return build_graph(n, edges)


@pytest.fixture
def edge2():
    return build_graph(2, [(0, 1)])


@pytest.fixture
def triangle():
    return build_graph(3, [(0, 1), (1, 2), (0, 2)])


@pytest.fixture
def fixture20():
    """The n=20 fixture used by gradient checks."""
    return random_graph(20, 0.2, seed=7, connected=True)
