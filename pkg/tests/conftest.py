from __future__ import annotations

import numpy as np
import pytest

from mola.synthworld import WorldConfig


@pytest.fixture(scope="session")
def world_config() -> WorldConfig:
    return WorldConfig()


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
