import numpy as np
import pytest

from deskct.fbp import LineIntegralSinogram, fbp_reconstruct, log_transform
from deskct.forward import Measurement, simulate_noisy
from deskct.geometry import FanBeamGeometry, GainBlurOperator
from deskct.grid import ImageGrid
from deskct.phantoms import Ellipse, EllipsePhantomSpec, rasterize


@pytest.fixture(scope="module")
def desk_geom():
    return FanBeamGeometry.full_rotation(1000.0, 500.0, n_det=256, det_pixel=2.0, n_views=240)


@pytest.fixture(scope="module")
def disk_image():
    spec = EllipsePhantomSpec((Ellipse(0.0, 0.0, 60.0, 60.0, 0.0, 0.02),))
    return rasterize(spec, 128, 128, 2.0)


class TestLogTransform:
    def test_flood_maps_to_zero(self, desk_geom):
        op = GainBlurOperator(4000.0, blur_sigma=0.0)
        shape = (desk_geom.n_views, desk_geom.n_det)
        m = Measurement(np.full(shape, 4000.0), np.full(shape, 4000.0), desk_geom, op)
        lines = log_transform(m)
        np.testing.assert_allclose(lines.values, 0.0, atol=1e-14)

    def test_two_attenuation_lengths(self, desk_geom):
        op = GainBlurOperator(4000.0, blur_sigma=0.0)
        shape = (desk_geom.n_views, desk_geom.n_det)
        m = Measurement(
            np.full(shape, 4000.0 * np.exp(-2.0)), np.full(shape, 10.0), desk_geom, op
        )
        np.testing.assert_allclose(log_transform(m).values, 2.0, rtol=1e-12)

    def test_zero_counts_clamped_finite(self, desk_geom):
        op = GainBlurOperator(4000.0, blur_sigma=0.0)
        shape = (desk_geom.n_views, desk_geom.n_det)
        m = Measurement(np.zeros(shape), np.full(shape, 10.0), desk_geom, op)
        lines = log_transform(m)
        np.testing.assert_allclose(lines.values, np.log(4000.0), rtol=1e-12)

    def test_bad_floor_rejected(self, desk_geom):
        op = GainBlurOperator(4000.0, blur_sigma=0.0)
        shape = (desk_geom.n_views, desk_geom.n_det)
        m = Measurement(np.ones(shape), np.ones(shape), desk_geom, op)
        with pytest.raises(ValueError):
            log_transform(m, floor=0.0)


class TestFbpReconstruct:
    def test_zero_sinogram_gives_zero_image(self, desk_geom):
        sino = LineIntegralSinogram(
            np.zeros((desk_geom.n_views, desk_geom.n_det)), desk_geom
        )
        out = fbp_reconstruct(sino, ImageGrid.zeros(128, 128, 2.0))
        assert np.all(out.data == 0.0)

    def test_linearity(self, desk_geom, disk_image, rng):
        like = ImageGrid.zeros(128, 128, 2.0)
        a = rng.standard_normal((desk_geom.n_views, desk_geom.n_det))
        b = rng.standard_normal((desk_geom.n_views, desk_geom.n_det))
        fa = fbp_reconstruct(LineIntegralSinogram(a, desk_geom), like).data
        fb = fbp_reconstruct(LineIntegralSinogram(b, desk_geom), like).data
        fab = fbp_reconstruct(LineIntegralSinogram(2 * a - 3 * b, desk_geom), like).data
        np.testing.assert_allclose(fab, 2 * fa - 3 * fb, atol=1e-10 * np.abs(fa).max())

    def test_disk_interior_recovery(self, desk_geom, disk_image):
        op = GainBlurOperator(1e6, blur_sigma=0.0)
        m = simulate_noisy(disk_image, desk_geom, op, seed=1, noise_scale=0.0)
        rec = fbp_reconstruct(log_transform(m), disk_image)
        xs, ys = disk_image.pixel_centers()
        interior = xs**2 + ys**2 <= (0.8 * 60.0) ** 2
        assert rec.data[interior].mean() == pytest.approx(0.02, rel=0.03)

    def test_sparse_views_are_worse(self, desk_geom, disk_image):
        op = GainBlurOperator(1e6, blur_sigma=0.0)
        geom24 = FanBeamGeometry.full_rotation(1000.0, 500.0, 256, 2.0, 24)
        full = simulate_noisy(disk_image, desk_geom, op, seed=1, noise_scale=0.0)
        sparse = simulate_noisy(disk_image, geom24, op, seed=1, noise_scale=0.0)
        rmse_full = np.sqrt(
            np.mean((fbp_reconstruct(log_transform(full), disk_image).data - disk_image.data) ** 2)
        )
        rmse_sparse = np.sqrt(
            np.mean((fbp_reconstruct(log_transform(sparse), disk_image).data - disk_image.data) ** 2)
        )
        assert rmse_sparse > rmse_full

    def test_shape_mismatch_rejected(self, desk_geom):
        with pytest.raises(ValueError):
            LineIntegralSinogram(np.zeros((3, 3)), desk_geom)
