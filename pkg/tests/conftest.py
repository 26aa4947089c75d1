import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("fclearn", deadline=None, max_examples=60)
settings.load_profile("fclearn")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
