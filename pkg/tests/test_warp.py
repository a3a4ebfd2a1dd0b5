import math

import numpy as np
import pytest

from learnaug.warp import (
    affine_matrix,
    affine_matrix_derivative,
    apply_crop,
    transform_features,
    warp_backward,
    warp_bilinear,
)

FAMILIES = ("rotation", "scale-x", "scale-y", "shear-x", "rot180")


def smooth_config(rng, h=6, w=6, family="rotation"):
    """Random (image, a, grad_out) such that every source coordinate that
    moves with a sits away from pixel boundaries: the warp is then locally
    smooth in a and central differences are trustworthy."""
    for _ in range(200):
        img = rng.random((1, 1, h, w))
        a = float(rng.uniform(0.1, 0.6))
        m = affine_matrix(family, a)
        dm = affine_matrix_derivative(family, a)
        minv = np.linalg.inv(m)
        xs = 2.0 * np.arange(w) / (w - 1) - 1.0
        ys = 2.0 * np.arange(h) / (h - 1) - 1.0
        gx, gy = np.meshgrid(xs, ys)
        grid = np.stack([gx.ravel(), gy.ravel(), np.ones(h * w)])
        src = minv @ grid
        vel = -minv @ dm @ src  # d(src)/da
        js = (src[0] + 1.0) * (w - 1) / 2.0
        is_ = (src[1] + 1.0) * (h - 1) / 2.0
        vj = vel[0] * (w - 1) / 2.0
        vi = vel[1] * (h - 1) / 2.0
        frac = np.concatenate([js - np.round(js), is_ - np.round(is_)])
        speed = np.concatenate([vj, vi])
        moving = np.abs(speed) > 1e-9
        margin = np.maximum(1e-3, 3e-4 * np.abs(speed))
        if np.all(np.abs(frac)[moving] > margin[moving]):
            return img, a, rng.random((1, 1, h, w))
    raise RuntimeError("no smooth configuration found")


class TestAffineMatrix:
    def test_rotation_zero_is_identity(self):
        np.testing.assert_array_equal(affine_matrix("rotation", 0.0), np.eye(3))

    def test_scale_x_entry(self):
        a = 0.37
        assert affine_matrix("scale-x", a)[0, 0] == pytest.approx(math.exp(a))

    def test_hflip_matrix(self):
        np.testing.assert_array_equal(affine_matrix("hflip", -1.0), np.diag([-1.0, 1.0, 1.0]))

    def test_unknown_family_errors(self):
        with pytest.raises(ValueError, match="unknown"):
            affine_matrix("translate", 0.1)

    def test_double_hflip_matrix_is_identity(self):
        f = affine_matrix("hflip", -1.0)
        np.testing.assert_array_equal(f @ f, np.eye(3))

    @pytest.mark.parametrize("family", FAMILIES)
    def test_matrix_derivative_matches_finite_difference(self, family):
        a, h = 0.43, 1e-7
        fd = (affine_matrix(family, a + h) - affine_matrix(family, a - h)) / (2 * h)
        np.testing.assert_allclose(affine_matrix_derivative(family, a), fd, atol=1e-6)


class TestWarpForward:
    def test_identity_is_bit_exact(self):
        rng = np.random.default_rng(0)
        x = rng.random((3, 2, 7, 5))
        np.testing.assert_array_equal(warp_bilinear(x, np.eye(3)), x)

    def test_half_turn_on_2x2_reverses_both_axes(self):
        x = np.arange(4.0).reshape(1, 1, 2, 2)
        out = warp_bilinear(x, affine_matrix("rotation", math.pi))
        np.testing.assert_allclose(out[0, 0], x[0, 0, ::-1, ::-1], atol=1e-12)

    def test_hflip_reverses_columns_w3(self):
        x = np.arange(6.0).reshape(1, 1, 2, 3)
        out = warp_bilinear(x, affine_matrix("hflip", -1.0))
        np.testing.assert_array_equal(out[0, 0], x[0, 0, :, ::-1])

    def test_double_hflip_round_trip(self):
        rng = np.random.default_rng(1)
        x = rng.random((2, 1, 9, 8))
        f = affine_matrix("hflip", -1.0)
        np.testing.assert_array_equal(warp_bilinear(warp_bilinear(x, f), f), x)

    def test_linearity_in_the_image(self):
        rng = np.random.default_rng(2)
        x1, x2 = rng.random((2, 2, 1, 6, 6))
        m = affine_matrix("rotation", 0.4)
        lhs = warp_bilinear(2.5 * x1 - 1.5 * x2, m)
        rhs = 2.5 * warp_bilinear(x1, m) - 1.5 * warp_bilinear(x2, m)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_singular_matrix_errors(self):
        x = np.ones((1, 1, 4, 4))
        with pytest.raises(ValueError, match="singular"):
            warp_bilinear(x, np.diag([0.0, 1.0, 1.0]))

    def test_per_sample_matrices(self):
        rng = np.random.default_rng(3)
        x = rng.random((2, 1, 5, 5))
        ms = np.stack([np.eye(3), affine_matrix("rotation", math.pi)])
        out = warp_bilinear(x, ms)
        np.testing.assert_array_equal(out[0], x[0])
        np.testing.assert_allclose(out[1, 0], x[1, 0, ::-1, ::-1], atol=1e-12)


class TestWarpBackward:
    def test_zero_cotangent(self):
        x = np.random.default_rng(0).random((1, 1, 4, 4))
        m = affine_matrix("rotation", 0.3)
        gin, ga = warp_backward(x, m, affine_matrix_derivative("rotation", 0.3), np.zeros_like(x))
        np.testing.assert_array_equal(gin, 0.0)
        np.testing.assert_array_equal(ga, 0.0)

    def test_identity_adjoint_passes_gradient_through(self):
        rng = np.random.default_rng(4)
        x, g = rng.random((2, 1, 1, 5, 5))
        gin, _ = warp_backward(x, np.eye(3), np.zeros((3, 3)), g)
        np.testing.assert_array_equal(gin, g)

    @pytest.mark.parametrize("family", FAMILIES)
    def test_dot_product_adjoint_identity(self, family):
        """<warp(I), G> == <I, warp_backward_input(G)> to near machine precision."""
        rng = np.random.default_rng(5)
        for _ in range(5):
            img, a, g = smooth_config(rng, family=family)
            m = affine_matrix(family, a)
            fwd = warp_bilinear(img, m)
            gin, _ = warp_backward(img, m, affine_matrix_derivative(family, a), g)
            lhs = float(np.sum(fwd * g))
            rhs = float(np.sum(img * gin))
            assert abs(lhs - rhs) <= 1e-6 * max(1.0, abs(lhs))

    @pytest.mark.parametrize("family", FAMILIES)
    def test_grad_a_matches_finite_difference(self, family):
        """d/da sum(warp(I, M(a)) * G) against a central difference."""
        rng = np.random.default_rng(6)
        for _ in range(5):
            img, a, g = smooth_config(rng, family=family)
            _, ga = warp_backward(
                img, affine_matrix(family, a), affine_matrix_derivative(family, a), g
            )
            h = 1e-4
            hi = float(np.sum(warp_bilinear(img, affine_matrix(family, a + h)) * g))
            lo = float(np.sum(warp_bilinear(img, affine_matrix(family, a - h)) * g))
            assert abs(ga[0] - (hi - lo) / (2 * h)) <= 1e-4

    def test_shape_mismatch_errors(self):
        x = np.ones((1, 1, 4, 4))
        with pytest.raises(ValueError, match="shape"):
            warp_backward(x, np.eye(3), np.zeros((3, 3)), np.ones((1, 1, 4, 5)))


class TestCrop:
    def test_centered_crop_is_identity(self):
        rng = np.random.default_rng(7)
        x = rng.random((2, 1, 6, 6))
        np.testing.assert_array_equal(apply_crop(x, 4, (0, 0)), x)

    def test_shift_introduces_zero_column(self):
        x = np.ones((1, 1, 2, 2))
        out = apply_crop(x, 1, (1, 0))
        np.testing.assert_array_equal(out[0, 0], [[1.0, 0.0], [1.0, 0.0]])

    def test_offset_out_of_range_errors(self):
        with pytest.raises(ValueError, match="offset"):
            apply_crop(np.ones((1, 1, 4, 4)), 4, (5, 0))


class TestFeatureMode:
    def test_rotation_acts_on_points(self):
        feats = np.array([[1.0, 0.0], [0.0, 2.0]])
        out = transform_features(feats, affine_matrix("rotation", math.pi / 2))
        np.testing.assert_allclose(out, [[0.0, 1.0], [-2.0, 0.0]], atol=1e-12)

    def test_norm_preserved_under_rotation(self):
        rng = np.random.default_rng(8)
        feats = rng.normal(size=(50, 2))
        out = transform_features(feats, affine_matrix("rotation", 1.234))
        np.testing.assert_allclose(
            np.linalg.norm(out, axis=1), np.linalg.norm(feats, axis=1), atol=1e-12
        )
