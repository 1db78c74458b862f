import numpy as np
import pytest

from mfdkf.config import parse_config
from mfdkf.noise import GmmModel


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def make_config():
    def _make(**kwargs):
        raw = {
            "system": "rotating",
            "noise": "gaussian(0,1)",
            "runs": 3,
            "steps": 30,
            "burn_in": 10,
            "calibration": {"samples": 2000},
        }
        raw.update(kwargs)
        return parse_config(raw=raw)

    return _make


@pytest.fixture
def two_component_gmm():
    return GmmModel(weights=[0.9, 0.1], means=[[0.0], [0.0]], covariances=[[[1.0]], [[100.0]]])
