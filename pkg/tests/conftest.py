import numpy as np
import pytest

from geofm.rng import Rng


@pytest.fixture
def rng():
    return Rng(1234)


def assert_close(a, b, tol=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = np.max(np.abs(a - b)) if a.size else 0.0
    assert diff <= tol, f"max abs diff {diff} > {tol}"
