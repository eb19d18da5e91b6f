import numpy as np
import pytest

from cemx.imagekit import BoundaryMode
from cemx.kernels import bicubic_kernel, gaussian_kernel
from cemx.cem import build_cem


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_op():
    """Periodic 8x8 HR, alpha 2, 3x3 gaussian: the workhorse tiny operator."""
    return build_cem(gaussian_kernel(0.8, radius=1), 2, (8, 8),
                     BoundaryMode.PERIODIC)


@pytest.fixture
def bicubic_op():
    return build_cem(bicubic_kernel(2), 2, (16, 16), BoundaryMode.PERIODIC)
