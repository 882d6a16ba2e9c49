import pytest
import torch

from ratlm.tensor import precision


@pytest.fixture
def f64():
    with precision(64):
        yield


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(1234)
