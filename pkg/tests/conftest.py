"""Shared fixtures: presets, seeded generators and small datasets."""

from __future__ import annotations

import numpy as np
import pytest

from highway_lab.config import PRESETS
from highway_lab.data import gen_synthetic


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def toy():
    return PRESETS["toy-1"]


@pytest.fixture(scope="session")
def micro():
    return PRESETS["micro"]


@pytest.fixture(scope="session")
def toy_data(toy):
    return gen_synthetic(7, 8, toy.img, 4, cell=toy.patch)


@pytest.fixture(scope="session")
def micro_data(micro):
    return gen_synthetic(3, 8, micro.img, 4, cell=micro.patch)
