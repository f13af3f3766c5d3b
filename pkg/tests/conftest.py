import numpy as np
import pytest

from handgs.synthetic import make_synthetic


@pytest.fixture(scope="session")
def quad_dataset(tmp_path_factory):
    return make_synthetic("quad", tmp_path_factory.mktemp("quad"), seed=0)


@pytest.fixture(scope="session")
def cylinder_dataset(tmp_path_factory):
    return make_synthetic("two-bone-cylinder", tmp_path_factory.mktemp("cyl"), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
