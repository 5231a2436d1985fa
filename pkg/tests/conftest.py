"""
Pytest configuration and fixtures for the grid-cell laboratory tests
"""

import numpy as np
import pytest

from src.model import ExternalInput, FiringRate, GridCellParams, MexicanHat, TauProfile, build_concrete_model
from src.noise import Mollifier, build_field
from src.particles import HolderFieldFamily, grid_locations


def make_params(orientations: int = 1, coupling: float = 1.0, base: float = 1.0, sigma: float = 0.5,
                firing_rate: str = "softplus", tau: float = 1.0, space_dim: int = 1) -> GridCellParams:
    """Concrete parameters with one Mexican hat shared by every orientation"""
    kernel = MexicanHat(coupling * 1.0, 0.1, coupling * 0.5, 0.3)
    return GridCellParams(
        orientations=orientations,
        space_dim=space_dim,
        tau=TauProfile(tau, tau),
        firing_rate=FiringRate(firing_rate),
        kernels=(kernel,) * orientations,
        external_input=ExternalInput(base=(base,) * orientations),
        noise_amplitude=sigma,
    )


@pytest.fixture
def params_b1():
    """B=1, d=1 concrete parameters"""
    return make_params()


@pytest.fixture
def concrete_model(params_b1):
    return build_concrete_model(params_b1)


@pytest.fixture
def grid4():
    return grid_locations(4, 1)


@pytest.fixture
def field4(grid4):
    """Noise field on the 4-node grid"""
    return build_field(grid4.points, 0.2, Mollifier("bump", 1), B=1, block_steps=16)


@pytest.fixture
def init_family():
    return HolderFieldFamily(alpha=1.0, orientations=1, space_dim=1, n_modes=16, amplitude=0.5, master_seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
