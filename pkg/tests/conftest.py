import numpy as np
import pytest

from deformseg.tensor import set_default_dtype


@pytest.fixture
def f64():
    """All oracle/gradient tests run in 64-bit mode."""
    set_default_dtype(np.float64)
    yield
    set_default_dtype(np.float32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
