from __future__ import annotations

import numpy as np
import pytest

from advlab.tensor import reset_tape


@pytest.fixture(autouse=True)
def _fresh_tape():
    reset_tape()
    yield
    reset_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
