import numpy as np
import pytest

from cbctsim.phantom import PhantomSpec, generate_phantom


@pytest.fixture(scope="session")
def phantom64():
    return generate_phantom(PhantomSpec(seed=1, size=(64, 64), n_slices=2))


@pytest.fixture(scope="session")
def phantom128():
    return generate_phantom(PhantomSpec(seed=1, size=(128, 128), n_slices=2))


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)
