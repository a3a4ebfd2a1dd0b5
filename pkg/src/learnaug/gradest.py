"""Monte-Carlo gradient estimators for the block probabilities and ranges.

Training reuses the M transform samples already drawn per datapoint
(shared-sample forms): the fire-probability gradient splits each
datapoint's samples by whether block s fired and differences the two
group means, and the range gradient averages the indicator-masked
reparametrization chain d(loss)/d(alpha). The slower paired form, which
forces block s on/off on top of shared draws for the other blocks, is
kept for verification; unlike the split-mean form it is unbiased for any
number of samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import AugDistribution, compose_transform, sample_block


@dataclass
class SampleLossRecords:
    """Per-(datapoint, sample) losses, fire flags and alpha chains.

    losses: (n, M); applied: (n, M, K) booleans; alpha_grads: (n, M, k)
    d(loss)/d(alpha_s), zero wherever block s did not fire.
    """

    losses: np.ndarray
    applied: np.ndarray
    alpha_grads: np.ndarray

    def validate(self) -> None:
        n, m = self.losses.shape
        if self.applied.shape[:2] != (n, m) or self.alpha_grads.shape[:2] != (n, m):
            raise ValueError("records disagree on (n, M)")
        k = self.alpha_grads.shape[2]
        if np.any(self.alpha_grads[~self.applied[:, :, :k]] != 0.0):
            raise ValueError("alpha chain must be zero where the block did not fire")


def pi_grads_shared(records: SampleLossRecords) -> np.ndarray:
    """Split-mean fire-probability gradient estimate, one value per block.

    For each datapoint: (mean loss over samples with the block fired)
    minus (mean loss over samples without). A group with no samples
    contributes zero for that datapoint.
    """
    losses = np.asarray(records.losses, dtype=np.float64)
    applied = np.asarray(records.applied, dtype=bool)
    n, m, k_all = applied.shape
    fired = applied.sum(axis=1)  # (n, K)
    skipped = m - fired
    sum_fired = np.einsum("nm,nmk->nk", losses, applied)
    sum_all = losses.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_fired = np.where(fired > 0, sum_fired / np.maximum(fired, 1), 0.0)
        mean_skipped = np.where(
            skipped > 0, (sum_all - sum_fired) / np.maximum(skipped, 1), 0.0
        )
    return (mean_fired - mean_skipped).mean(axis=0)


def alpha_grads_shared(records: SampleLossRecords) -> np.ndarray:
    """Indicator-weighted mean of the per-sample alpha chains.

    The fire indicator stands in for the explicit pi_s factor of the
    paired form, so the average runs over all n*M samples.
    """
    grads = np.asarray(records.alpha_grads, dtype=np.float64)
    k = grads.shape[2]
    masked = grads * records.applied[:, :, :k]
    return masked.mean(axis=(0, 1))


def pi_grad_paired(
    dist: AugDistribution,
    loss_fn,
    batch: np.ndarray,
    block_index: int,
    mc_samples: int,
    rng: np.random.Generator,
) -> float:
    """Paired-difference estimate of the loss derivative in pi_s.

    loss_fn maps a transformed batch to per-sample losses (any model
    stub works). For each of M rounds, all other blocks are drawn once
    per datapoint and shared between two evaluations: one with block s
    forced to fire (parameter drawn from its base distribution), one with
    block s skipped. pi_s itself never enters the computation.
    """
    from .blocks import apply_transforms

    batch = np.asarray(batch, dtype=np.float64)
    n = batch.shape[0]
    total = 0.0
    for _ in range(mc_samples):
        with_s, without_s = [], []
        for _i in range(n):
            applied = np.empty(dist.k, dtype=bool)
            draws = np.empty(dist.k, dtype=np.float64)
            for b_idx, block in enumerate(dist.blocks):
                applied[b_idx], draws[b_idx] = sample_block(block, rng)
            forced = applied.copy()
            forced[block_index] = True
            skipped = applied.copy()
            skipped[block_index] = False
            with_s.append(compose_transform(dist, forced, draws))
            without_s.append(compose_transform(dist, skipped, draws))
        l_with = np.asarray(loss_fn(apply_transforms(batch, with_s)))
        l_without = np.asarray(loss_fn(apply_transforms(batch, without_s)))
        total += float(np.mean(l_with - l_without))
    return total / mc_samples
