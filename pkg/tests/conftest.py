import numpy as np
import pytest

from rerand.finite_pop import ExperimentFrame
from rerand.rng import substream


@pytest.fixture
def small_frame():
    rng = substream(101, "fixture")
    return ExperimentFrame(rng.standard_normal((40, 5)))


def random_frame(seed, n, k, rr_cols=None, adj_cols=None):
    rng = substream(seed, "frame")
    return ExperimentFrame(rng.standard_normal((n, k)), rr_cols=rr_cols, adj_cols=adj_cols)


def equicorrelated(rng, n, d, rho=0.7):
    common = rng.standard_normal(n)
    return np.sqrt(rho) * common[:, None] + np.sqrt(1 - rho) * rng.standard_normal((n, d))
