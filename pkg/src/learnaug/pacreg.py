"""Closed-form PAC-Bayes regularizer and generalization-bound arithmetic.

The regularizer is a sum of per-block KL divergences between the learned
block mixture and a fixed prior mixture that puts mass beta on the
identity and 1-beta uniformly on the full range. Natural logarithms
throughout; 0*log(0) is taken as 0 for values, while gradients require
pi strictly inside (0, 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .blocks import CONTINUOUS, AugDistribution

LAMBDA_SCHEDULES = ("constant", "linear-decay-to-zero")


@dataclass(frozen=True)
class RegConfig:
    """Prior identity mass and regularization weight."""

    beta: float = 0.01
    lambda_reg: float = 0.006
    lambda_reg_schedule: str = "constant"

    def validate(self) -> None:
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta={self.beta} outside (0, 1)")
        if self.lambda_reg < 0.0:
            raise ValueError(f"lambda_reg={self.lambda_reg} negative")
        if self.lambda_reg_schedule not in LAMBDA_SCHEDULES:
            raise ValueError(f"unknown lambda_reg schedule {self.lambda_reg_schedule!r}")


@dataclass(frozen=True)
class BoundConfig:
    """Constants entering the generalization bound.

    s is the prior weight std, sigma the posterior std (None means use the
    optimized value), lipschitz the loss Lipschitz constant in the weights,
    and loss_clip an optional loss range b-a for the bounded-loss variant
    of the residual term.
    """

    n: int
    p: int
    s: float = 1.0
    sigma: float | None = None
    lipschitz: float = 1.0
    delta: float = 0.05
    loss_clip: float | None = None

    def validate(self) -> None:
        if self.n < 1 or self.p < 1:
            raise ValueError("n and p must be >= 1")
        if self.s <= 0.0 or self.lipschitz < 0.0:
            raise ValueError("need s > 0 and lipschitz >= 0")
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta={self.delta} outside (0, 1)")


def _plog(p: float, num: float, den: float) -> float:
    """p * log(num / den) with the p = 0 limit taken as 0."""
    if p == 0.0:
        return 0.0
    return p * math.log(num / den)


def bernoulli_kl(q: float, p: float) -> float:
    return _plog(q, q, p) + _plog(1.0 - q, 1.0 - q, 1.0 - p)


def kl_continuous_block(pi: float, alpha: float, a_max: float, beta: float) -> float:
    """KL of the learned (pi, alpha) mixture from the (beta, a_max) prior.

    Equals the Bernoulli KL of the fire probabilities plus pi times the
    KL between the two uniform ranges, log(a_max / alpha).
    """
    if not 0.0 <= pi <= 1.0:
        raise ValueError(f"pi={pi} outside [0, 1]")
    if not 0.0 < alpha <= a_max:
        raise ValueError(f"alpha={alpha} outside (0, {a_max}]")
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta={beta} outside (0, 1)")
    return bernoulli_kl(pi, 1.0 - beta) + pi * math.log(a_max / alpha)


def kl_discrete_block(pi: float, n_support: int, beta: float) -> float:
    """KL for a discrete block whose support of size N contains the identity.

    Reduces to a Bernoulli KL at success probabilities scaled by 1 - 1/N.
    """
    if not 0.0 <= pi <= 1.0:
        raise ValueError(f"pi={pi} outside [0, 1]")
    if n_support < 2:
        raise ValueError(f"n_support={n_support} < 2")
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta={beta} outside (0, 1)")
    q = 1.0 - 1.0 / n_support
    return bernoulli_kl(q * pi, q * (1.0 - beta))


def reg_value(dist: AugDistribution, cfg: RegConfig) -> float:
    """Sum of per-block KL terms (the lambda_reg weight is not applied here)."""
    total = 0.0
    for b in dist.blocks:
        if b.kind == CONTINUOUS:
            total += kl_continuous_block(b.pi, b.alpha, b.a_max, cfg.beta)
        else:
            total += kl_discrete_block(b.pi, b.n_support, cfg.beta)
    return total


def reg_grad(dist: AugDistribution, cfg: RegConfig):
    """Analytic partials (d/dpi per block, d/dalpha per continuous block).

    Requires every pi strictly inside (0, 1); clamp first during training.
    """
    beta = cfg.beta
    dpi = np.empty(dist.k)
    dalpha = np.empty(dist.k_parametric)
    ci = 0
    for i, b in enumerate(dist.blocks):
        if not 0.0 < b.pi < 1.0:
            raise ValueError(f"pi={b.pi} on the boundary; gradient undefined")
        if b.kind == CONTINUOUS:
            dpi[i] = (
                math.log(b.pi / (1.0 - beta))
                - math.log((1.0 - b.pi) / beta)
                + math.log(b.a_max / b.alpha)
            )
            dalpha[ci] = -b.pi / b.alpha
            ci += 1
        else:
            q = 1.0 - 1.0 / b.n_support
            dpi[i] = q * (
                math.log(b.pi / (1.0 - beta))
                - math.log((1.0 - q * b.pi) / (1.0 - q * (1.0 - beta)))
            )
    return dpi, dalpha


def lambda_reg_at(cfg: RegConfig, epoch: int, epochs_joint: int) -> float:
    """Effective lambda_reg at a joint-training epoch under the schedule."""
    if cfg.lambda_reg_schedule == "constant" or epochs_joint == 0:
        return cfg.lambda_reg
    return cfg.lambda_reg * max(0.0, 1.0 - epoch / epochs_joint)


def sigma_star(cfg: BoundConfig) -> float:
    """Posterior std minimizing the bound at lambda = sqrt(n); equals s when L = 0."""
    cfg.validate()
    n, p, s, lip = cfg.n, cfg.p, cfg.s, cfg.lipschitz
    return 1.0 / (math.sqrt(n * lip**2 / p + 1.0 / s**2) + math.sqrt(n / p) * lip)


def residual_term(cfg: BoundConfig, variant: str = "subgaussian") -> float:
    """Vanishing additive term of the bound at lambda = sqrt(n).

    variant selects the concentration residual: "subgaussian" uses s^2/2,
    "bounded" uses loss_clip^2/8 and requires loss_clip to be set.
    """
    cfg.validate()
    n, p, s, lip, delta = cfg.n, cfg.p, cfg.s, cfg.lipschitz, cfg.delta
    if lip == 0.0:
        raise ValueError("residual term undefined for lipschitz = 0")
    if variant == "subgaussian":
        f_term = s**2 / 2.0
    elif variant == "bounded":
        if cfg.loss_clip is None:
            raise ValueError("bounded variant needs loss_clip")
        f_term = cfg.loss_clip**2 / 8.0
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return (
        p * math.log(2.0 * lip * s * math.sqrt(n) / math.sqrt(p))
        + p**2 / (8.0 * lip**2 * s**2 * n)
        + math.log(1.0 / delta)
        + f_term
        + p / 2.0
    ) / math.sqrt(n)


def bound_terms(cfg: BoundConfig, variant: str = "subgaussian"):
    """(optimized posterior std, vanishing residual) for the bound."""
    return sigma_star(cfg), residual_term(cfg, variant)


def pac_bound(
    train_risk: float,
    weights,
    dist: AugDistribution,
    reg_cfg: RegConfig,
    bound_cfg: BoundConfig,
    variant: str = "subgaussian",
) -> float:
    """Right-hand side of the generalization bound at the current iterate.

    weights is anything exposing .w and .w0 flat arrays. The value is
    reported for monitoring; it is typically vacuous for deep models.
    """
    dw = np.asarray(weights.w, dtype=np.float64) - np.asarray(weights.w0, dtype=np.float64)
    norm_term = float(dw @ dw) / (2.0 * bound_cfg.s**2)
    return (
        train_risk
        + (norm_term + reg_value(dist, reg_cfg)) / math.sqrt(bound_cfg.n)
        + residual_term(bound_cfg, variant)
    )
