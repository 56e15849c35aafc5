import numpy as np
import pytest

from cstformer.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(arr):
    """float64 leaf tensor tracking gradients."""
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)
