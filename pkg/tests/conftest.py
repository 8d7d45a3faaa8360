"""Shared fixtures for the unit tests."""

from __future__ import annotations

import numpy as np
import pytest

from parasource.meshing import build_interval_mesh, build_rect_mesh


@pytest.fixture(scope="session")
def unit_interval_100():
    return build_interval_mesh(0.0, 1.0, 100)


@pytest.fixture(scope="session")
def pi_interval_200():
    return build_interval_mesh(0.0, np.pi, 200)


@pytest.fixture(scope="session")
def unit_square_8():
    return build_rect_mesh(8, 8, (1.0, 1.0))


@pytest.fixture
def rng():
    return np.random.default_rng(20260819)
