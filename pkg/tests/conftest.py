import numpy as np
import pytest
import torch

from cdstl.data import make_shapes, stratified_holdout
from cdstl.nncore import use_single_thread

use_single_thread()


@pytest.fixture(scope="session")
def shapes_small():
    """K=4, 24 per class, 16x16."""
    return make_shapes(3, 24, 16, 4)


@pytest.fixture(scope="session")
def shapes_split():
    full = make_shapes(5, 40, 16, 4)
    return stratified_holdout(full, 0.25, 1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _torch_seed():
    # the package never uses torch's global RNG; this guards against accidental reliance
    torch.manual_seed(12345)
