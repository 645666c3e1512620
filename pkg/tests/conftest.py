import numpy as np
import pytest

from mpsim import backend


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=backend.available())
def kernel_backend(request):
    """Run the test once per importable kernel backend."""
    prev = backend.active_name()
    backend.use(request.param)
    yield backend.get(request.param)
    backend.use(prev)
