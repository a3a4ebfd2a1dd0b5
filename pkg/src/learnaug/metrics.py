"""Test-time augmentation, accuracy and calibration metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import net
from .blocks import AugDistribution, apply_transforms, sample_transform

DEFAULT_BINS = 15


@dataclass
class CalibrationBins:
    """Per-bin counts, mean accuracy and mean confidence.

    Bins partition [0, 1] into equal intervals, left-closed right-open
    except the last, which also contains confidence exactly 1.0.
    gap_sums holds each bin's accumulated (correct - confidence) mass,
    summed per sample with compensated accumulation; the calibration
    error derives from it rather than from re-multiplying the rounded
    bin means (|gap_sums[m]| equals counts[m] * |acc[m] - conf[m]|).
    """

    edges: np.ndarray
    counts: np.ndarray
    acc: np.ndarray
    conf: np.ndarray
    gap_sums: np.ndarray

    def rows(self) -> list:
        return [
            {
                "lo": float(self.edges[i]),
                "hi": float(self.edges[i + 1]),
                "count": int(self.counts[i]),
                "acc": float(self.acc[i]),
                "conf": float(self.conf[i]),
            }
            for i in range(len(self.counts))
        ]


def predict_tta(
    params: net.ModelParams,
    dist: AugDistribution,
    batch: np.ndarray,
    n_samples: int,
    rng: np.random.Generator,
    dtype=np.float64,
) -> np.ndarray:
    """Average the post-softmax probabilities over n_samples transforms
    drawn per input."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    batch = np.asarray(batch, dtype=np.float64)
    n = batch.shape[0]
    total = None
    for _ in range(n_samples):
        transforms = [sample_transform(dist, rng) for _ in range(n)]
        p = net.forward(params, apply_transforms(batch, transforms), dtype=dtype)
        total = p if total is None else total + p
    return total / n_samples


def accuracy(probs, labels) -> float:
    """Fraction of rows whose argmax matches the label; argmax breaks ties
    toward the lowest class index."""
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if probs.shape[0] != labels.shape[0]:
        raise ValueError("probability rows and labels disagree")
    return float(np.mean(probs.argmax(axis=1) == labels))


def reliability_bins(confidences, correct, num_bins: int = DEFAULT_BINS) -> CalibrationBins:
    """Bin statistics underlying the expected calibration error.

    Per-bin sums use compensated (correctly rounded) accumulation, so the
    statistics do not depend on sample order.
    """
    confidences = np.asarray(confidences, dtype=np.float64)
    correct = np.asarray(correct, dtype=np.float64)
    n = confidences.size
    if n == 0:
        raise ValueError("no samples to calibrate")
    if confidences.min() < 0.0 or confidences.max() > 1.0:
        raise ValueError("confidences must lie in [0, 1]")
    idx = np.minimum((confidences * num_bins).astype(np.int64), num_bins - 1)
    order = np.argsort(idx, kind="stable")
    bounds = np.searchsorted(idx[order], np.arange(num_bins + 1))
    counts = np.empty(num_bins, dtype=np.int64)
    acc = np.zeros(num_bins)
    conf = np.zeros(num_bins)
    gap_sums = np.zeros(num_bins)
    for b in range(num_bins):
        members = order[bounds[b] : bounds[b + 1]]
        counts[b] = members.size
        if members.size:
            acc[b] = math.fsum(correct[members]) / members.size
            conf[b] = math.fsum(confidences[members]) / members.size
            gap_sums[b] = math.fsum(correct[members] - confidences[members])
    return CalibrationBins(
        edges=np.linspace(0.0, 1.0, num_bins + 1),
        counts=counts,
        acc=acc,
        conf=conf,
        gap_sums=gap_sums,
    )


def ece_from_bins(bins: CalibrationBins) -> float:
    n = bins.counts.sum()
    return math.fsum(abs(g) for g in bins.gap_sums) / n


def ece(confidences, correct, num_bins: int = DEFAULT_BINS) -> float:
    """Bin-weighted absolute gap between mean confidence and mean accuracy;
    empty bins contribute nothing."""
    return ece_from_bins(reliability_bins(confidences, correct, num_bins))


def evaluation_report(
    params: net.ModelParams,
    dist: AugDistribution,
    dataset,
    rng: np.random.Generator,
    tta_sizes=(4, 8),
    num_bins: int = DEFAULT_BINS,
    dtype=np.float64,
) -> dict:
    """Accuracy with and without test-time augmentation, plus calibration
    of the smallest-TTA predictions."""
    plain = net.forward(params, dataset.x, dtype=dtype)
    report = {"accuracy_no_tta": accuracy(plain, dataset.labels)}
    first_probs = None
    for n_samples in tta_sizes:
        probs = predict_tta(params, dist, dataset.x, n_samples, rng, dtype=dtype)
        if first_probs is None:
            first_probs = probs
        report[f"accuracy_tta_{n_samples}"] = accuracy(probs, dataset.labels)
    scored = first_probs if first_probs is not None else plain
    conf = scored.max(axis=1)
    correct = (scored.argmax(axis=1) == dataset.labels).astype(np.float64)
    bins = reliability_bins(conf, correct, num_bins)
    report["ece"] = ece_from_bins(bins)
    report["bins"] = bins.rows()
    return report
