"""Shared fixtures; puts the repository root on sys.path like main.py does."""

import os
import sys

import numpy as np
import pytest

_PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if _PROJECT_ROOT not in sys.path:
    sys.path.insert(0, _PROJECT_ROOT)

from datasets import gen_blobs, quadratic_testbed  # noqa: E402
from loss_models import QuadraticConsensus, SoftmaxRegression, quadratic_party_models  # noqa: E402

CROSS_CENTERS = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]


@pytest.fixture
def cross_centers():
    """Four client centers with G^2 = 1 and mean (0, 0)."""
    return [list(c) for c in CROSS_CENTERS]


@pytest.fixture
def quad_data():
    """Exact testbed, server center on the client mean (xi_bar = 0)."""
    return quadratic_testbed(CROSS_CENTERS, [0.0, 0.0], samples_per_party=4)


@pytest.fixture
def quad_data_shifted():
    """Exact testbed with xi_bar^2 = 0.25."""
    return quadratic_testbed(CROSS_CENTERS, [0.5, 0.0], samples_per_party=4)


@pytest.fixture
def quad_model():
    """Single quadratic centered at the origin."""
    return QuadraticConsensus.zeros(2)


@pytest.fixture
def quad_models():
    """Party models matching ``quad_data``."""
    return quadratic_party_models(CROSS_CENTERS, [0.0, 0.0])


@pytest.fixture
def quad_models_shifted():
    """Party models matching ``quad_data_shifted``."""
    return quadratic_party_models(CROSS_CENTERS, [0.5, 0.0])


@pytest.fixture
def small_blobs():
    return gen_blobs(3, 20, 4, 0.7, seed=3)


@pytest.fixture
def softmax_model():
    return SoftmaxRegression(4, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
