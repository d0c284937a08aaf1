import pytest

from rgbdseg import precision


@pytest.fixture(autouse=True)
def force_64bit():
    precision.set_precision(64)
    yield
    precision.set_precision(64)
