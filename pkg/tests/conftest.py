import numpy as np
import pytest

from deskct.geometry import FanBeamGeometry, GainBlurOperator
from deskct.grid import ImageGrid


@pytest.fixture(scope="session")
def tiny_geom() -> FanBeamGeometry:
    """12 views x 24 bins; FOV comfortably covers a 16x16 grid at 9 mm pixels."""
    return FanBeamGeometry.full_rotation(
        sdd=1000.0, sad=500.0, n_det=24, det_pixel=12.0, n_views=12
    )


@pytest.fixture(scope="session")
def tiny_grid() -> ImageGrid:
    return ImageGrid.zeros(16, 16, 9.0)


@pytest.fixture(scope="session")
def tiny_op() -> GainBlurOperator:
    return GainBlurOperator(5000.0, blur_sigma=0.5)


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)
