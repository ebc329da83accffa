import numpy as np
import pytest

from hsps.coincidence import TagStream, available_backends


@pytest.fixture(params=available_backends())
def backend(request):
    return request.param


def random_stream(seed, n=400, span=600, n_channels=3, resolution=1e-9):
    rng = np.random.default_rng(seed)
    t = np.sort(rng.integers(0, span, n)).astype(np.uint64)
    ch = rng.integers(0, n_channels, n).astype(np.uint8)
    return TagStream(ch, t, resolution, n_channels, duration=span * resolution)
