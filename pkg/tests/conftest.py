import numpy as np
import pytest

from sthmm.graph import NeighborhoodSystem, build_grid
from sthmm.latent import LatentParams


def random_theta(K, rng, scale=1.0, symmetric=False, shared_time=False):
    """Random constraint-respecting latent parameters."""
    def mat():
        m = scale * rng.standard_normal((K, K))
        if symmetric:
            m = np.triu(m, 1) + np.triu(m, 1).T
        np.fill_diagonal(m, 0.0)
        return m

    b = np.append(scale * rng.standard_normal(K - 1), 0.0)
    g = mat()
    bs, gs = (b, g) if shared_time else (np.append(scale * rng.standard_normal(K - 1), 0.0), mat())
    return LatentParams(b, bs, g, gs, mat(), symmetric, shared_time)


def scenario_a_theta():
    g = np.array([[0.0, -1.0], [1.0, 0.0]])
    return LatentParams(np.array([2.0, 0.0]), np.array([2.0, 0.0]), g, g.copy(),
                        np.array([[0.0, -1.0], [-1.0, 0.0]]))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def grid2():
    return build_grid(2)


@pytest.fixture
def example11():
    # Four sites, edges 1-2 and 3-4.
    return NeighborhoodSystem(4, [(1, 2), (3, 4)])
