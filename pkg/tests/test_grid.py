"""Grid math: interpolation, warping, field algebra, Jacobians."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from lapreg.errors import ShapeMismatchError, ValidationError
from lapreg.grid import (
    DisplacementField,
    Volume,
    compose,
    jacobian_det,
    trilinear_sample,
    upsample_field,
    warp,
    warp_labels,
)


def rand_volume(seed, shape=(6, 6, 6)):
    rng = np.random.default_rng(seed)
    return Volume(rng.random(shape, dtype=np.float32))


def smooth_field(seed, shape=(8, 8, 8), amplitude=1.0):
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(seed)
    data = np.stack(
        [gaussian_filter(rng.standard_normal(shape), sigma=2.0) for _ in range(3)], axis=-1
    )
    peak = np.abs(data).max()
    return DisplacementField((data * (amplitude / peak)).astype(np.float32))


class TestTypes:
    def test_volume_rejects_nan(self):
        data = np.zeros((4, 4, 4), dtype=np.float32)
        data[0, 0, 0] = np.nan
        with pytest.raises(ValidationError):
            Volume(data)

    def test_volume_rejects_wrong_rank(self):
        with pytest.raises(ValidationError):
            Volume(np.zeros((4, 4)))

    def test_field_requires_three_components(self):
        with pytest.raises(ValidationError):
            DisplacementField(np.zeros((4, 4, 4, 2)))

    def test_field_rejects_inf(self):
        data = np.zeros((4, 4, 4, 3))
        data[1, 1, 1, 0] = np.inf
        with pytest.raises(ValidationError):
            DisplacementField(data)


class TestTrilinearSample:
    def test_grid_point_value(self):
        vol = rand_volume(0)
        vol.data[2, 3, 4] = 7.0
        assert trilinear_sample(vol, (2, 3, 4)) == pytest.approx(7.0, abs=1e-12)

    def test_midpoint_linearity(self):
        data = np.zeros((4, 4, 4), dtype=np.float64)
        data[1, 0, 0] = 1.0
        assert trilinear_sample(Volume(data), (0.5, 0, 0)) == pytest.approx(0.5, abs=1e-12)

    def test_border_clamp(self):
        vol = rand_volume(1, (4, 4, 4))
        assert trilinear_sample(vol, (-1.2, 0, 0)) == pytest.approx(
            float(vol.data[0, 0, 0]), abs=1e-7
        )

    def test_non_finite_coords_rejected(self):
        vol = rand_volume(2)
        with pytest.raises(ValidationError):
            trilinear_sample(vol, (np.nan, 0, 0))

    def test_matches_reference_on_random_coords(self):
        vol = rand_volume(3)
        rng = np.random.default_rng(7)
        coords = rng.uniform(-1.5, 7.0, size=(40, 3))
        got = trilinear_sample(vol, coords)
        want = [oracles.trilinear_ref(vol.data, c) for c in coords]
        np.testing.assert_allclose(got, want, atol=1e-6)

    @given(st.integers(0, 2**31 - 1), st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_linearity_in_volume(self, seed_a, seed_b):
        va, vb = rand_volume(seed_a), rand_volume(seed_b)
        rng = np.random.default_rng(seed_a ^ seed_b)
        a, b = 0.7, -1.3
        coords = rng.uniform(0, 5, size=(5, 3))
        mixed = Volume(a * va.data + b * vb.data)
        lhs = trilinear_sample(mixed, coords)
        rhs = a * trilinear_sample(va, coords) + b * trilinear_sample(vb, coords)
        np.testing.assert_allclose(lhs, rhs, atol=1e-6)


class TestWarp:
    def test_identity_is_bitwise(self):
        vol = rand_volume(0, (8, 8, 8))
        out = warp(vol, DisplacementField.zeros((8, 8, 8)))
        assert np.array_equal(out.data, vol.data)

    def test_constant_shift_of_ramp(self):
        shape = (6, 6, 6)
        ramp = np.broadcast_to(
            np.arange(6, dtype=np.float32)[:, None, None], shape
        ).copy()
        field = DisplacementField(
            np.tile(np.array([1.0, 0, 0], dtype=np.float32), (*shape, 1))
        )
        out = warp(Volume(ramp), field)
        expected = np.minimum(ramp + 1.0, 5.0)  # clamped at the far face
        np.testing.assert_allclose(out.data, expected, atol=1e-6)

    def test_shape_mismatch_names_both(self):
        with pytest.raises(ShapeMismatchError) as err:
            warp(rand_volume(0, (6, 6, 6)), DisplacementField.zeros((8, 8, 8)))
        assert "(6, 6, 6)" in str(err.value) and "(8, 8, 8)" in str(err.value)

    def test_matches_reference(self):
        vol = rand_volume(5, (8, 8, 8))
        field = smooth_field(6, amplitude=1.5)
        out = warp(vol, field)
        ref = oracles.warp_ref(vol.data, field.data)
        np.testing.assert_allclose(out.data, ref, atol=1e-6)

    def test_synthetic_pair_construction(self):
        from lapreg.synth import generate_pair

        pair = generate_pair(11, size=(16, 16, 16), max_disp=1.5)
        rewarped = warp(pair.moving, pair.gt_field)
        assert np.abs(rewarped.data - pair.fixed.data).mean() < 1e-3

    def test_nearest_mode_keeps_values(self):
        labels = np.zeros((6, 6, 6), dtype=np.int32)
        labels[2:4, 2:4, 2:4] = 5
        field = DisplacementField(
            np.tile(np.array([0.6, 0, 0], dtype=np.float32), (6, 6, 6, 1))
        )
        out = warp_labels(labels, field)
        assert set(np.unique(out)) <= {0, 5}
        assert out.dtype == labels.dtype


class TestUpsampleField:
    def test_zero_stays_zero(self):
        out = upsample_field(DisplacementField.zeros((4, 4, 4)))
        assert out.shape == (8, 8, 8)
        assert np.all(out.data == 0)

    def test_constant_doubles(self):
        const = np.tile(np.array([0.5, 0, 0], dtype=np.float32), (4, 4, 4, 1))
        out = upsample_field(DisplacementField(const))
        np.testing.assert_allclose(out.data[..., 0], 1.0, atol=1e-6)
        np.testing.assert_allclose(out.data[..., 1:], 0.0, atol=1e-6)

    def test_rejects_other_factors(self):
        with pytest.raises(ValidationError):
            upsample_field(DisplacementField.zeros((4, 4, 4)), factor=3)

    def test_linear_field_matches_reference(self):
        coords = np.stack(np.meshgrid(*[np.arange(4)] * 3, indexing="ij"), axis=-1)
        field = DisplacementField((0.1 * coords).astype(np.float32))
        out = upsample_field(field)
        ref = oracles.upsample_field_ref(field.data)
        np.testing.assert_allclose(out.data, ref, atol=1e-6)

    def test_random_field_matches_reference(self):
        field = smooth_field(9, (4, 4, 4), amplitude=0.8)
        out = upsample_field(field)
        ref = oracles.upsample_field_ref(field.data)
        np.testing.assert_allclose(out.data, ref, atol=1e-6)


class TestCompose:
    def test_zero_outer_is_exact_identity(self):
        f = smooth_field(1)
        out = compose(DisplacementField.zeros((8, 8, 8)), f)
        assert np.array_equal(out.data, f.data)

    def test_zero_inner_within_tolerance(self):
        f = smooth_field(2)
        out = compose(f, DisplacementField.zeros((8, 8, 8)))
        np.testing.assert_allclose(out.data, f.data, atol=1e-6)

    def test_translation_group(self):
        shape = (8, 8, 8)
        a = DisplacementField(np.tile(np.array([0.5, 0.25, 0], dtype=np.float32), (*shape, 1)))
        b = DisplacementField(np.tile(np.array([0.25, 0.5, 0.75], dtype=np.float32), (*shape, 1)))
        out = compose(a, b)
        interior = out.data[1:-2, 1:-2, 1:-2]
        np.testing.assert_allclose(interior, 0.75, atol=1e-6)

    def test_matches_reference(self):
        outer = smooth_field(3, amplitude=1.2)
        inner = smooth_field(4, amplitude=1.2)
        out = compose(outer, inner)
        ref = oracles.compose_ref(outer.data, inner.data)
        np.testing.assert_allclose(out.data, ref, atol=1e-6)

    def test_application_consistency(self):
        vol = Volume(
            np.random.default_rng(0).random((8, 8, 8)).astype(np.float32)
        )
        from scipy.ndimage import gaussian_filter

        vol = Volume(gaussian_filter(vol.data, sigma=1.5))
        first = DisplacementField(oracles.tapered_smooth_field(5, amplitude=0.8))
        second = DisplacementField(oracles.tapered_smooth_field(6, amplitude=0.8))
        sequential = warp(warp(vol, first), second)
        composed = warp(vol, compose(first, second))
        assert np.abs(sequential.data - composed.data).mean() < 2e-3


class TestJacobianDet:
    def test_zero_field_is_one(self):
        det = jacobian_det(DisplacementField.zeros((5, 5, 5)))
        np.testing.assert_allclose(det, 1.0, atol=1e-12)

    def test_linear_field_interior(self):
        coords = np.stack(np.meshgrid(*[np.arange(6)] * 3, indexing="ij"), axis=-1)
        data = np.zeros((6, 6, 6, 3))
        data[..., 0] = 0.1 * coords[..., 0]
        det = jacobian_det(DisplacementField(data))
        np.testing.assert_allclose(det[1:-1], 1.1, atol=1e-9)

    def test_fold_goes_negative_and_matches_reference(self):
        data = np.zeros((5, 5, 5, 3), dtype=np.float64)
        data[2, 2, 2, 0] = -3.0  # one voxel displaced past its neighbor
        field = DisplacementField(data)
        det = jacobian_det(field)
        ref = oracles.jacobian_det_ref(field.data)
        np.testing.assert_allclose(det, ref, atol=1e-9)
        assert det[1, 2, 2] < 0
        assert (det <= 0).sum() == 1

    def test_needs_two_voxels_per_axis(self):
        with pytest.raises(ValidationError):
            jacobian_det(DisplacementField.zeros((1, 5, 5)))


class TestProperties:
    def test_warp_compose_consistency_on_random_pairs(self):
        from scipy.ndimage import gaussian_filter

        rng = np.random.default_rng(42)
        for trial in range(10):
            smooth = gaussian_filter(rng.standard_normal((8, 8, 8)), sigma=2.0)
            vol = Volume((smooth - smooth.min()) / (smooth.max() - smooth.min()))
            first = DisplacementField(oracles.tapered_smooth_field(100 + trial))
            second = DisplacementField(oracles.tapered_smooth_field(200 + trial))
            sequential = warp(warp(vol, first), second)
            composed = warp(vol, compose(first, second))
            assert np.abs(sequential.data - composed.data).mean() < 2e-3

    def test_upsample_preserves_translations(self):
        const = np.tile(np.array([0.3, -0.2, 0.1], dtype=np.float32), (4, 4, 4, 1))
        out = upsample_field(DisplacementField(const))
        np.testing.assert_allclose(
            out.data, np.broadcast_to(2 * const[0, 0, 0], out.data.shape), atol=1e-6
        )

    def test_zero_field_has_no_folds(self):
        det = jacobian_det(DisplacementField.zeros((6, 6, 6)))
        assert (det <= 0).sum() == 0
