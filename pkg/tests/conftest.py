import numpy as np
import pytest

from anml.data import make_synthetic_store
from anml.models import get_profile, treatment_profile


@pytest.fixture(scope="session")
def desk():
    return get_profile("desk")


@pytest.fixture(scope="session")
def small_store():
    """20 classes: 12 meta-train, 8 meta-test, 14x14."""
    return make_synthetic_store(20, 20, 14, 0, n_meta_test=8)


@pytest.fixture
def build(desk):
    def make(treatment="ANML", seed=0, dtype=np.float32):
        return treatment_profile(treatment).build(desk, seed, dtype)

    return make
