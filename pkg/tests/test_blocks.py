import math

import numpy as np
import pytest

from learnaug import warp
from learnaug.blocks import (
    ALPHA_FLOOR,
    CONTINUOUS,
    CROP,
    DISCRETE,
    HFLIP,
    ROTATION,
    AugBlock,
    AugDistribution,
    apply_transforms,
    clamp_distribution,
    compose_transform,
    crop_offset_from_index,
    default_distribution,
    sample_transform,
)


class TestDefaultDistribution:
    def test_seven_blocks_four_continuous(self):
        dist = default_distribution()
        assert dist.k == 7
        assert dist.k_parametric == 4
        np.testing.assert_allclose(dist.pis(), 1.0 / 7.0)

    def test_initial_alphas(self):
        dist = default_distribution()
        np.testing.assert_allclose(dist.alphas(), 0.1)

    def test_crop_support_covers_padded_window(self):
        crop = default_distribution().blocks[6]
        assert crop.family == CROP
        assert crop.n_support == 81
        # all 81 indices map to offsets within +-4, and index of (0,0) exists
        offsets = {crop_offset_from_index(i, 81) for i in range(81)}
        assert len(offsets) == 81
        assert (0, 0) in offsets
        assert all(abs(dx) <= 4 and abs(dy) <= 4 for dx, dy in offsets)

    def test_validation_rejects_misordered_blocks(self):
        d = AugDistribution(
            (
                AugBlock(HFLIP, DISCRETE, 0.5, n_support=2),
                AugBlock(ROTATION, CONTINUOUS, 0.5, alpha=0.1, a_max=math.pi),
            )
        )
        with pytest.raises(ValueError):
            d.validate()


class TestSampling:
    def test_zero_pi_gives_identity(self):
        dist = default_distribution().with_params(np.zeros(7), [0.1] * 4)
        st = sample_transform(dist, np.random.default_rng(0))
        assert not st.applied.any()
        np.testing.assert_array_equal(st.matrix, np.eye(3))
        assert st.crop_offset is None

    def test_zero_draw_rotation_is_identity(self):
        dist = AugDistribution(
            (AugBlock(ROTATION, CONTINUOUS, 1.0, alpha=0.5, a_max=math.pi),)
        )
        st = compose_transform(dist, [True], [0.0])
        np.testing.assert_allclose(st.matrix, np.eye(3))

    def test_empty_composition_acts_as_identity_on_images(self):
        dist = default_distribution().with_params(np.zeros(7), [0.1] * 4)
        rng = np.random.default_rng(3)
        x = rng.random((2, 1, 5, 5))
        sts = [sample_transform(dist, rng) for _ in range(2)]
        out = apply_transforms(x, sts)
        np.testing.assert_array_equal(out, x)

    def test_seed_determinism(self):
        dist = default_distribution()
        a = [sample_transform(dist, np.random.default_rng(11)) for _ in range(20)]
        b = [sample_transform(dist, np.random.default_rng(11)) for _ in range(20)]
        for sa, sb in zip(a, b):
            np.testing.assert_array_equal(sa.applied, sb.applied)
            np.testing.assert_array_equal(sa.draws, sb.draws)
            np.testing.assert_array_equal(sa.matrix, sb.matrix)
            assert sa.crop_offset == sb.crop_offset

    def test_hflip_conditional_frequency_is_half(self):
        """Fired flips choose the flipped outcome half the time."""
        dist = AugDistribution((AugBlock(HFLIP, DISCRETE, 1.0, n_support=2),))
        rng = np.random.default_rng(7)
        n = 100_000
        flips = sum(int(sample_transform(dist, rng).draws[0]) for _ in range(n))
        assert abs(flips / n - 0.5) < 0.01

    def test_marginal_application_frequency_matches_pi(self):
        """Each block fires with frequency pi_i (3-sigma binomial band)."""
        dist = default_distribution()
        rng = np.random.default_rng(5)
        n = 100_000
        counts = np.zeros(7)
        for _ in range(n):
            counts += sample_transform(dist, rng).applied
        pi = 1.0 / 7.0
        band = 3.0 * math.sqrt(pi * (1.0 - pi) / n)
        np.testing.assert_array_less(np.abs(counts / n - pi), band)

    def test_order_sensitivity_of_composition(self):
        """rotation @ shear differs from shear @ rotation."""
        rot = AugBlock(ROTATION, CONTINUOUS, 1.0, alpha=1.0, a_max=math.pi)
        shear = AugBlock("shear-x", CONTINUOUS, 1.0, alpha=1.0, a_max=1.0)
        d1 = AugDistribution((rot, shear))
        d2 = AugDistribution((shear, rot))
        m1 = compose_transform(d1, [True, True], [0.7, 0.5]).matrix
        m2 = compose_transform(d2, [True, True], [0.5, 0.7]).matrix
        assert not np.allclose(m1, m2)
        expected = warp.affine_matrix(ROTATION, 0.7) @ warp.affine_matrix("shear-x", 0.5)
        np.testing.assert_allclose(m1, expected)


class TestClamp:
    def test_upper_projection(self):
        dist = default_distribution().with_params([1.2] + [0.5] * 6, [0.1] * 4)
        out = clamp_distribution(dist, 0.05)
        assert out.blocks[0].pi == pytest.approx(0.95)

    def test_interior_point_unchanged(self):
        dist = default_distribution().with_params([0.5] * 7, [0.1] * 4)
        out = clamp_distribution(dist, 0.05)
        assert out.blocks[0].pi == 0.5

    def test_alpha_floor(self):
        dist = default_distribution().with_params([0.5] * 7, [-0.3, 0.1, 0.1, 0.1])
        out = clamp_distribution(dist, 0.05)
        assert out.blocks[0].alpha == ALPHA_FLOOR

    def test_alpha_ceiling_at_a_max(self):
        dist = default_distribution().with_params([0.5] * 7, [99.0, 0.1, 0.1, 0.1])
        out = clamp_distribution(dist, 0.0)
        assert out.blocks[0].alpha == out.blocks[0].a_max

    def test_clamp_is_pure(self):
        dist = default_distribution()
        clamp_distribution(dist, 0.2)
        np.testing.assert_allclose(dist.pis(), 1.0 / 7.0)


class TestSerialization:
    def test_dict_round_trip(self):
        dist = default_distribution().with_params(
            [0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9], [0.2, 0.3, 0.4, 0.5]
        )
        again = AugDistribution.from_dict(dist.to_dict())
        assert again == dist

    def test_unknown_key_rejected(self):
        d = default_distribution().to_dict()
        d["blocks"][0]["frequency"] = 0.5
        with pytest.raises(ValueError, match="frequency"):
            AugDistribution.from_dict(d)
