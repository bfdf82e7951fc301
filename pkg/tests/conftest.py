import numpy as np
import pytest

from lungscreen.volume import CtVolume


def make_volume(slices, positions=None, spacing=(1.0, 1.0), ids=None):
    slices = np.asarray(slices, dtype=np.int16)
    n = slices.shape[0]
    if positions is None:
        positions = [2.0 * k for k in range(n)]
    if ids is None:
        ids = list(range(1, n + 1))
    return CtVolume(slices, spacing, tuple(positions), tuple(ids))


def random_volume(rng, n=None, rows=None, cols=None, positions=None, low=-1100, high=2100):
    n = n or int(rng.integers(1, 30))
    rows = rows or int(rng.integers(2, 9))
    cols = cols or int(rng.integers(2, 9))
    data = rng.integers(low, high, size=(n, rows, cols))
    if positions is None:
        steps = rng.uniform(0.5, 5.0, size=n)
        positions = np.round(np.cumsum(steps) - steps[0], 3)
    return make_volume(data, positions)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def uniform_volume():
    """30 slices, 2 mm apart, each slice filled with its own index value."""
    data = np.stack([np.full((4, 4), k, dtype=np.int16) for k in range(30)])
    return make_volume(data)
