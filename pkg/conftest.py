"""Shared fixtures: the default laboratory parameter set."""

import math

import numpy as np
import pytest

from config import load_config


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: closed-loop simulations that take seconds to minutes")


@pytest.fixture
def cfg():
    return load_config()


@pytest.fixture
def plant(cfg):
    return cfg.plant()


@pytest.fixture
def controller(cfg):
    return cfg.controller()


@pytest.fixture
def grid_params(cfg):
    return cfg.grid()


@pytest.fixture
def va_conv(cfg):
    return cfg.va_conventional()


@pytest.fixture
def va_prop(cfg):
    return cfg.va_proposed()


@pytest.fixture
def omega_1():
    return 2 * math.pi * 60.0


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
