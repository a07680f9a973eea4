"""Shared fixtures for the simulator tests."""

import numpy as np
import pytest

from core_model import PhysicalParams
from meanfield import IntegratorControls


@pytest.fixture
def lab_params():
    return PhysicalParams.experiment_defaults()


@pytest.fixture
def dispersive_params():
    """Same single-atom shift as the experimental set with the atoms detuned 100x further."""
    return PhysicalParams.experiment_defaults(delta_A_mhz=-3500.0, g_mhz=3.3)


@pytest.fixture
def controls():
    return IntegratorControls()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
