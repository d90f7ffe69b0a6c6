"""Preprocessing oracles: windowing boundaries, analytic ramp resampling,
crop index arithmetic, and the convex-envelope property."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from t3d.errors import CropTooLargeError, InvalidDimsError, InvalidSpacingError, InvalidWindowError
from t3d.volume import Volume, crop_origin, hu_window, make_views, random_crop, resample, resize


def ramp_volume(dims=(16, 16, 8), a=0.1, b=0.05, spacing=(1.0, 1.0, 1.0)):
    """v[x, y, z] = a + b*x, linear along the first axis."""
    x = np.arange(dims[0], dtype=np.float32)[:, None, None]
    voxels = np.broadcast_to(a + b * x, dims).astype(np.float32)
    return Volume(voxels.copy(), spacing)


class TestHuWindow:
    def test_below_window_clamps_to_zero(self):
        v = Volume(np.full((2, 2, 2), -1500.0), (1, 1, 1))
        assert np.all(hu_window(v, -1000.0, 1000.0).voxels == 0.0)

    def test_upper_boundary_maps_to_one(self):
        v = Volume(np.full((2, 2, 2), 1000.0), (1, 1, 1))
        assert np.all(hu_window(v, -1000.0, 1000.0).voxels == 1.0)

    def test_midpoint_maps_to_half(self):
        # oracle: (0 - lo) / (hi - lo) = 1000 / 2000 = 0.5
        v = Volume(np.zeros((2, 2, 2)), (1, 1, 1))
        assert np.all(hu_window(v, -1000.0, 1000.0).voxels == 0.5)

    def test_sets_unit_range_and_keeps_spacing(self):
        v = Volume(np.zeros((2, 2, 2)), (1.0, 2.0, 4.0))
        out = hu_window(v, -1000.0, 1000.0)
        assert out.unit_range and out.spacing == (1.0, 2.0, 4.0)

    def test_rewindowing_unit_range_is_identity(self):
        rng = np.random.default_rng(0)
        v = hu_window(Volume(rng.normal(0, 300, (4, 5, 6)), (1, 1, 1)), -1000.0, 1000.0)
        again = hu_window(v, 0.0, 1.0)
        np.testing.assert_array_equal(again.voxels, v.voxels)

    def test_invalid_window_rejected(self):
        v = Volume(np.zeros((2, 2, 2)), (1, 1, 1))
        with pytest.raises(InvalidWindowError):
            hu_window(v, 5.0, 5.0)


class TestResample:
    def test_identity_spacing_is_voxel_identical(self):
        rng = np.random.default_rng(1)
        v = Volume(rng.uniform(0, 1, (5, 6, 7)), (1.0, 1.5, 4.0))
        out = resample(v, (1.0, 1.5, 4.0))
        np.testing.assert_array_equal(out.voxels, v.voxels)

    def test_constant_stays_constant(self):
        v = Volume(np.full((6, 6, 6), 0.37, dtype=np.float32), (2.0, 2.0, 2.0))
        out = resample(v, (0.7, 1.3, 3.1))
        np.testing.assert_allclose(out.voxels, 0.37, atol=1e-6)

    def test_ramp_matches_analytic_linear_function(self):
        # corner-anchored: output j samples source coordinate u = j * t / s,
        # clamped to [0, n-1]; a linear ramp interpolates exactly.
        a, b = 0.1, 0.05
        v = ramp_volume((16, 4, 4), a, b, spacing=(2.0, 1.0, 1.0))
        out = resample(v, (1.0, 1.0, 1.0))
        assert out.dims == (32, 4, 4)
        u = np.minimum(np.arange(32) * (1.0 / 2.0), 15.0)
        expected = a + b * u
        np.testing.assert_allclose(out.voxels[:, 0, 0], expected, atol=1e-6)

    def test_envelope_never_exceeded(self):
        rng = np.random.default_rng(2)
        v = Volume(rng.uniform(0.2, 0.8, (7, 5, 6)), (1.0, 2.0, 3.0))
        out = resample(v, (0.6, 1.1, 4.2))
        assert out.voxels.min() >= v.voxels.min() - 1e-6
        assert out.voxels.max() <= v.voxels.max() + 1e-6

    def test_output_dims_formula(self):
        # dims = round_half_up(d * s / t): (10*1/2, 10*1/4, 10*4/1) = (5, 2.5->3, 40)
        v = Volume(np.zeros((10, 10, 10)), (1.0, 1.0, 4.0))
        out = resample(v, (2.0, 4.0, 1.0))
        assert out.dims == (5, 3, 40)
        assert out.spacing == (2.0, 4.0, 1.0)

    def test_invalid_spacing_rejected(self):
        v = Volume(np.zeros((2, 2, 2)), (1, 1, 1))
        with pytest.raises(InvalidSpacingError):
            resample(v, (0.0, 1.0, 1.0))


class TestResize:
    def test_identity_dims(self):
        rng = np.random.default_rng(3)
        v = Volume(rng.uniform(0, 1, (6, 5, 4)), (1, 1, 1))
        np.testing.assert_array_equal(resize(v, (6, 5, 4)).voxels, v.voxels)

    def test_constant_stays_constant(self):
        v = Volume(np.full((8, 8, 8), 0.5, dtype=np.float32), (1, 1, 1))
        np.testing.assert_allclose(resize(v, (3, 5, 9)).voxels, 0.5, atol=1e-6)

    def test_ramp_halved_dims_match_analytic_positions(self):
        a, b = 0.2, 0.04
        v = ramp_volume((16, 16, 8), a, b)
        out = resize(v, (8, 8, 4))
        assert out.dims == (8, 8, 4)
        expected = a + b * (np.arange(8) * 2.0)  # u = j * (16/8)
        np.testing.assert_allclose(out.voxels[:, 0, 0], expected, atol=1e-6)

    def test_spacing_rescaled_to_preserve_extent(self):
        v = Volume(np.zeros((16, 16, 8)), (1.0, 1.0, 4.0))
        out = resize(v, (8, 4, 8))
        assert out.spacing == (2.0, 4.0, 4.0)

    def test_zero_dim_rejected(self):
        v = Volume(np.zeros((4, 4, 4)), (1, 1, 1))
        with pytest.raises(InvalidDimsError):
            resize(v, (0, 4, 4))


class TestRandomCrop:
    def test_full_size_crop_is_identity_at_origin(self):
        rng = np.random.default_rng(4)
        v = Volume(np.random.default_rng(0).uniform(0, 1, (5, 6, 7)), (1, 1, 1))
        out = random_crop(v, (5, 6, 7), rng)
        np.testing.assert_array_equal(out.voxels, v.voxels)

    def test_same_seed_same_origin(self):
        v = Volume(np.zeros((8, 8, 8)), (1, 1, 1))
        o1 = crop_origin(v.dims, (4, 4, 4), np.random.default_rng(42))
        o2 = crop_origin(v.dims, (4, 4, 4), np.random.default_rng(42))
        assert o1 == o2

    def test_crop_matches_manual_slice_at_reported_origin(self):
        # voxel value = linear index makes the slice check exact
        voxels = np.arange(8 * 8 * 8, dtype=np.float32).reshape(8, 8, 8)
        v = Volume(voxels, (1, 1, 1))
        origin = crop_origin(v.dims, (4, 4, 4), np.random.default_rng(7))
        out = random_crop(v, (4, 4, 4), np.random.default_rng(7))
        ox, oy, oz = origin
        np.testing.assert_array_equal(out.voxels, voxels[ox:ox + 4, oy:oy + 4, oz:oz + 4])

    def test_crop_too_large_rejected(self):
        v = Volume(np.zeros((4, 4, 4)), (1, 1, 1))
        with pytest.raises(CropTooLargeError):
            random_crop(v, (5, 4, 4), np.random.default_rng(0))

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_crop_is_always_an_exact_subarray(self, seed):
        voxels = np.arange(6 * 5 * 4, dtype=np.float32).reshape(6, 5, 4)
        v = Volume(voxels, (1, 1, 1))
        origin = crop_origin(v.dims, (3, 2, 2), np.random.default_rng(seed))
        out = random_crop(v, (3, 2, 2), np.random.default_rng(seed))
        ox, oy, oz = origin
        np.testing.assert_array_equal(out.voxels, voxels[ox:ox + 3, oy:oy + 2, oz:oz + 2])


class TestMakeViews:
    def test_three_views_of_crop_dims(self):
        v = Volume(np.random.default_rng(0).uniform(0, 1, (32, 32, 16)), (1, 1, 1))
        views = make_views(v, 3, (16, 16, 8), np.random.default_rng(0))
        assert len(views) == 3
        assert all(view.dims == (16, 16, 8) for view in views)

    def test_single_full_view_is_original(self):
        v = Volume(np.random.default_rng(1).uniform(0, 1, (8, 8, 8)), (1, 1, 1))
        (view,) = make_views(v, 1, (8, 8, 8), np.random.default_rng(0))
        np.testing.assert_array_equal(view.voxels, v.voxels)

    def test_fixed_seed_reproduces_origins(self):
        v = Volume(np.random.default_rng(2).uniform(0, 1, (16, 16, 16)), (1, 1, 1))
        a = make_views(v, 3, (8, 8, 8), np.random.default_rng(9))
        b = make_views(v, 3, (8, 8, 8), np.random.default_rng(9))
        for va, vb in zip(a, b):
            np.testing.assert_array_equal(va.voxels, vb.voxels)
