import types

import numpy as np
import pytest

from packages import space_time_grid as stg
from packages.diffusion_profile import ModifiedProfile, modify_profile, quadratic_glued


@pytest.fixture(scope="session")
def profile():
    """sigma(s) = s(s-3) on [0, 4], 4 + 5(s-4) beyond."""
    return quadratic_glued()


@pytest.fixture(scope="session")
def modified(profile):
    return modify_profile(profile, 1.125)


@pytest.fixture
def heat():
    return ModifiedProfile.linear()


@pytest.fixture
def heat_law():
    """The flux law A(p) = p in the shape the verifiers read (only ``sigma`` is used)."""
    return types.SimpleNamespace(sigma=lambda s: np.asarray(s, dtype=float))


@pytest.fixture
def line():
    return stg.interval_grid(nodes=33, horizon=0.01, steps=16)


@pytest.fixture
def square():
    return stg.rectangle_grid(nodes=(17, 17), horizon=0.01, steps=8)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
