import numpy as np
import pytest

from learnaug.blocks import default_distribution
from learnaug.data import Dataset
from learnaug.metrics import (
    accuracy,
    ece,
    ece_from_bins,
    evaluation_report,
    predict_tta,
    reliability_bins,
)
from learnaug.net import build_model, forward, mlp_spec

HAND_CONF = np.array([0.9, 0.8, 0.4, 0.3])
HAND_CORRECT = np.array([1.0, 0.0, 1.0, 0.0])


class TestEce:
    def test_perfectly_confident_and_correct(self):
        assert ece(np.ones(10), np.ones(10), 15) == 0.0

    def test_hand_fixture_two_bins(self):
        assert ece(HAND_CONF, HAND_CORRECT, 2) == pytest.approx(0.25, abs=0.0)

    def test_bins_of_hand_fixture(self):
        bins = reliability_bins(HAND_CONF, HAND_CORRECT, 2)
        np.testing.assert_array_equal(bins.counts, [2, 2])
        np.testing.assert_allclose(bins.acc, [0.5, 0.5])
        np.testing.assert_allclose(bins.conf, [0.35, 0.85])

    def test_reconstruction_is_bit_exact(self):
        rng = np.random.default_rng(0)
        conf = rng.random(500)
        correct = (rng.random(500) < conf).astype(float)
        assert ece(conf, correct, 15) == ece_from_bins(reliability_bins(conf, correct, 15))

    def test_calibrated_stream_ece_vanishes(self):
        """Correctness drawn Bernoulli(conf): ECE -> 0 with n."""
        rng = np.random.default_rng(1)
        conf = rng.random(100_000)
        correct = (rng.random(100_000) < conf).astype(float)
        assert ece(conf, correct, 15) <= 0.02

    def test_bounds_and_top_bin_inclusion(self):
        rng = np.random.default_rng(2)
        conf = rng.random(200)
        correct = rng.integers(0, 2, 200).astype(float)
        assert 0.0 <= ece(conf, correct) <= 1.0
        bins = reliability_bins(np.array([1.0]), np.array([1.0]), 15)
        assert bins.counts[-1] == 1

    def test_single_bin_degenerates_to_global_means(self):
        bins = reliability_bins(HAND_CONF, HAND_CORRECT, 1)
        assert bins.acc[0] == pytest.approx(0.5)
        assert bins.conf[0] == pytest.approx(0.6)

    def test_counts_partition_samples(self):
        rng = np.random.default_rng(3)
        conf = rng.random(777)
        bins = reliability_bins(conf, np.ones(777), 15)
        assert bins.counts.sum() == 777

    def test_empty_input_errors(self):
        with pytest.raises(ValueError):
            ece(np.array([]), np.array([]), 15)


class TestAccuracy:
    def test_identity_predictions(self):
        assert accuracy(np.eye(4), np.arange(4)) == 1.0

    def test_all_wrong(self):
        probs = np.eye(4)[::-1]
        assert accuracy(probs, np.arange(4)) == 0.0

    def test_uniform_rows_tie_break_to_class_zero(self):
        probs = np.full((3, 5), 0.2)
        assert accuracy(probs, np.zeros(3, int)) == 1.0
        assert accuracy(probs, np.ones(3, int)) == 0.0


class TestPredictTta:
    def _model(self, seed=0):
        rng = np.random.default_rng(seed)
        return build_model(mlp_spec((1, 6, 6), 16, 3), (1, 6, 6), rng)

    def test_identity_distribution_equals_plain_forward(self):
        params = self._model()
        dist = default_distribution().with_params(np.zeros(7), [0.1] * 4)
        x = np.random.default_rng(1).random((5, 1, 6, 6))
        tta = predict_tta(params, dist, x, 1, np.random.default_rng(2))
        np.testing.assert_allclose(tta, forward(params, x), atol=1e-12)

    def test_rows_stay_normalized(self):
        params = self._model()
        dist = default_distribution()
        x = np.random.default_rng(3).random((4, 1, 6, 6))
        tta = predict_tta(params, dist, x, 8, np.random.default_rng(4))
        np.testing.assert_allclose(tta.sum(axis=1), 1.0, atol=1e-6)

    def test_variance_shrinks_with_sample_count(self):
        """Var of TTA outputs over repetitions decays about like 1/N."""
        params = self._model()
        dist = default_distribution()
        x = np.random.default_rng(5).random((2, 1, 6, 6))
        rng = np.random.default_rng(6)
        variances = {}
        for n_samples in (4, 16, 64):
            reps = np.stack(
                [predict_tta(params, dist, x, n_samples, rng) for _ in range(40)]
            )
            variances[n_samples] = reps.var(axis=0).mean()
        assert variances[16] < variances[4]
        assert variances[64] < variances[16]
        assert 2.0 < variances[4] / variances[16] < 8.0

    def test_report_schema(self):
        params = self._model()
        dist = default_distribution()
        rng = np.random.default_rng(7)
        ds = Dataset(rng.random((12, 1, 6, 6)), rng.integers(0, 3, 12), 3, "toy")
        report = evaluation_report(params, dist, ds, rng)
        for key in ("accuracy_no_tta", "accuracy_tta_4", "accuracy_tta_8", "ece", "bins"):
            assert key in report
        assert len(report["bins"]) == 15
        assert sum(b["count"] for b in report["bins"]) == 12
