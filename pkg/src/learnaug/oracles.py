"""Independent brute-force oracles for the closed forms and estimators.

Everything here is built from primitive arithmetic, quadrature and finite
differences only; no code is shared with the implementations under test.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class OracleReport:
    """One closed-form-vs-oracle comparison."""

    name: str
    closed_form: float
    oracle: float
    tolerance: float
    abs_err: float = field(init=False)
    passed: bool = field(init=False)

    def __post_init__(self):
        self.abs_err = abs(self.closed_form - self.oracle)
        self.passed = self.abs_err <= self.tolerance

    def row(self) -> str:
        mark = "pass" if self.passed else "FAIL"
        return (
            f"{self.name:<44s} closed={self.closed_form: .9e} "
            f"oracle={self.oracle: .9e} err={self.abs_err:.2e} "
            f"tol={self.tolerance:.0e} {mark}"
        )


def kl_quadrature(
    pi: float, alpha: float, a_max: float, beta: float, grid_points: int = 10_000
) -> float:
    """KL(Q || P) for the atom-plus-uniform mixtures by direct integration.

    Q has an atom of mass 1-pi at the identity and density pi/(2*alpha) on
    [-alpha, alpha]; P has atom beta and density (1-beta)/(2*a_max) on
    [-a_max, a_max]. The atom contributes (1-pi) log((1-pi)/beta) exactly;
    the density part is integrated with a midpoint rule, evaluating the
    density ratio pointwise.
    """
    if grid_points < 1_000:
        raise ValueError("use at least 1000 grid points")
    atom = 0.0 if pi == 1.0 else (1.0 - pi) * math.log((1.0 - pi) / beta)
    if pi == 0.0:
        return atom
    dx = 2.0 * alpha / grid_points
    xs = -alpha + dx * (np.arange(grid_points) + 0.5)
    q_density = np.full_like(xs, pi / (2.0 * alpha))
    p_density = np.where(np.abs(xs) <= a_max, (1.0 - beta) / (2.0 * a_max), 0.0)
    integrand = q_density * np.log(q_density / p_density)
    return atom + float(np.sum(integrand) * dx)


def kl_discrete_sum(pi: float, n_support: int, beta: float) -> float:
    """KL between the discrete mixtures by summing over the N outcomes.

    Outcome 0 is the identity, reachable both through the atom and through
    the uniform part.
    """
    total = 0.0
    for x in range(n_support):
        q = (1.0 - pi) + pi / n_support if x == 0 else pi / n_support
        p = beta + (1.0 - beta) / n_support if x == 0 else (1.0 - beta) / n_support
        if q > 0.0:
            total += q * math.log(q / p)
    return total


def exact_mixture_loss_and_grads(
    loss_fn, pi: float, alpha: float, num_points: int = 10_000, h: float = 1e-5
):
    """Exact expected loss and its (pi, alpha) derivatives for one block.

    loss_fn maps a 1-d array of transform parameters a to the array of
    losses of the transformed datapoint. The expectation over
    a = alpha*eps, eps ~ U[-1, 1] is taken by a midpoint rule; d/dpi is
    the applied-minus-skipped difference and d/dalpha a central finite
    difference of the expectation.
    """

    def expected(al: float) -> float:
        de = 2.0 / num_points
        eps = -1.0 + de * (np.arange(num_points) + 0.5)
        return float(np.mean(loss_fn(al * eps)))

    l_skip = float(loss_fn(np.zeros(1))[0])
    e_apply = expected(alpha)
    value = (1.0 - pi) * l_skip + pi * e_apply
    d_pi = e_apply - l_skip
    d_alpha = pi * (expected(alpha + h) - expected(alpha - h)) / (2.0 * h)
    return value, d_pi, d_alpha


def finite_diff(fn, x, h: float = 1e-5):
    """Central-difference gradient of fn at x (scalar or 1-d array)."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    grad = np.empty_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = h
        hi = fn(x + step) if x.size > 1 else fn(float(x[0] + h))
        lo = fn(x - step) if x.size > 1 else fn(float(x[0] - h))
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise ValueError("non-finite evaluation in finite difference")
        grad[i] = (hi - lo) / (2.0 * h)
    return float(grad[0]) if grad.size == 1 else grad


# --- deterministic verification sweep ----------------------------------------


def _worst(name, pairs, tolerance) -> OracleReport:
    """Report for the worst (closed, oracle) pair of a sub-grid."""
    closed, oracle = max(pairs, key=lambda p: abs(p[0] - p[1]))
    return OracleReport(name, float(closed), float(oracle), tolerance)


def _smooth_warp_setting(rng, family, h=6, w=6):
    """Image/parameter pair whose moving source coordinates sit away from
    pixel boundaries (the warp is then locally smooth in the parameter)."""
    from .warp import affine_matrix, affine_matrix_derivative

    while True:
        img = rng.random((1, 1, h, w))
        a = float(rng.uniform(0.1, 0.6))
        minv = np.linalg.inv(affine_matrix(family, a))
        xs = 2.0 * np.arange(w) / (w - 1) - 1.0
        ys = 2.0 * np.arange(h) / (h - 1) - 1.0
        gx, gy = np.meshgrid(xs, ys)
        grid = np.stack([gx.ravel(), gy.ravel(), np.ones(h * w)])
        src = minv @ grid
        vel = -minv @ affine_matrix_derivative(family, a) @ minv @ grid
        frac = np.concatenate(
            [
                (src[0] + 1.0) * (w - 1) / 2.0 - np.round((src[0] + 1.0) * (w - 1) / 2.0),
                (src[1] + 1.0) * (h - 1) / 2.0 - np.round((src[1] + 1.0) * (h - 1) / 2.0),
            ]
        )
        speed = np.concatenate([vel[0] * (w - 1) / 2.0, vel[1] * (h - 1) / 2.0])
        moving = np.abs(speed) > 1e-9
        if np.all(np.abs(frac)[moving] > np.maximum(1e-3, 3e-4 * np.abs(speed)[moving])):
            return img, a, rng.random((1, 1, h, w))


def run_all_checks() -> list:
    """Every closed form against its brute-force oracle; deterministic."""
    from . import net, pacreg
    from .blocks import default_distribution
    from .warp import affine_matrix, affine_matrix_derivative, warp_backward, warp_bilinear

    reports = []
    betas, pis, ratios = (0.01, 0.1), (0.01, 0.25, 0.5, 0.9, 0.99), (0.1, 0.5, 1.0)

    for beta in betas:
        pairs = [
            (pacreg.kl_continuous_block(pi, r * 1.7, 1.7, beta), kl_quadrature(pi, r * 1.7, 1.7, beta))
            for pi in pis
            for r in ratios
        ]
        reports.append(_worst(f"kl-continuous[beta={beta}] worst of 15", pairs, 1e-6))
        pairs = [
            (pacreg.kl_discrete_block(pi, n, beta), kl_discrete_sum(pi, n, beta))
            for pi in pis
            for n in (2, 81)
        ]
        reports.append(_worst(f"kl-discrete[beta={beta}] worst of 10", pairs, 1e-6))

    # regularizer gradient vs central differences
    rng = np.random.default_rng(2024)
    cfg = pacreg.RegConfig(beta=0.01)
    pairs_pi, pairs_alpha = [], []
    for _ in range(5):
        base = default_distribution()
        pis_v = rng.uniform(0.05, 0.95, size=7)
        alphas_v = rng.uniform(0.05, 0.95, size=4) * np.array([np.pi, 1.0, 1.0, 1.0])
        dist = base.with_params(pis_v, alphas_v)
        dpi, dalpha = pacreg.reg_grad(dist, cfg)
        for i in range(7):
            def f(p, i=i):
                v = pis_v.copy()
                v[i] = p
                return pacreg.reg_value(base.with_params(v, alphas_v), cfg)

            pairs_pi.append((dpi[i], finite_diff(f, pis_v[i], h=1e-6)))
        for i in range(4):
            def g(a, i=i):
                v = alphas_v.copy()
                v[i] = a
                return pacreg.reg_value(base.with_params(pis_v, v), cfg)

            pairs_alpha.append((dalpha[i], finite_diff(g, alphas_v[i], h=1e-6)))
    reports.append(_worst("reg-grad dpi vs finite diff (35 pts)", pairs_pi, 1e-5))
    reports.append(_worst("reg-grad dalpha vs finite diff (20 pts)", pairs_alpha, 1e-5))

    # warp: parameter gradient and adjoint identity
    for family in ("rotation", "scale-x", "scale-y", "shear-x", "rot180"):
        pairs, dots = [], []
        for _ in range(3):
            img, a, g = _smooth_warp_setting(rng, family)
            m, dm = affine_matrix(family, a), affine_matrix_derivative(family, a)
            gin, ga = warp_backward(img, m, dm, g)
            h = 1e-4
            hi = float(np.sum(warp_bilinear(img, affine_matrix(family, a + h)) * g))
            lo = float(np.sum(warp_bilinear(img, affine_matrix(family, a - h)) * g))
            pairs.append((ga[0], (hi - lo) / (2 * h)))
            dots.append(
                (float(np.sum(warp_bilinear(img, m) * g)), float(np.sum(img * gin)))
            )
        reports.append(_worst(f"warp grad_a[{family}] vs finite diff", pairs, 1e-4))
        reports.append(_worst(f"warp adjoint[{family}] dot-product", dots, 1e-9))

    # network gradients vs coordinate finite differences
    for label, spec, shape in (
        ("mlp", net.mlp_spec((1, 6, 6), 12, 3), (1, 6, 6)),
        (
            "cnn",
            [
                {"type": "conv3x3", "cin": 1, "cout": 3},
                {"type": "relu"},
                {"type": "maxpool2"},
                {"type": "conv3x3", "cin": 3, "cout": 4},
                {"type": "relu"},
                {"type": "flatten"},
                {"type": "dense", "din": 4 * 9, "dout": 3},
            ],
            (1, 6, 6),
        ),
    ):
        params = net.build_model(spec, shape, rng)
        x = rng.random((5, *shape))
        y = rng.integers(0, 3, size=5)
        grad = net.loss_and_grad(params, x, y).grad_w
        pairs = []
        for i in rng.choice(params.p, size=30, replace=False):
            def f(wi, i=i):
                keep = params.w[i]
                params.w[i] = wi
                val = net.loss_and_grad(params, x, y).loss
                params.w[i] = keep
                return val

            pairs.append((grad[i], finite_diff(f, params.w[i], h=1e-5)))
        reports.append(_worst(f"net[{label}] grad vs finite diff (30 coords)", pairs, 1e-4))

    # bound terms against frozen high-precision constants
    bcfg = pacreg.BoundConfig(n=100, p=10, s=1.0, lipschitz=1.0, delta=0.05)
    sig, cn = pacreg.bound_terms(bcfg)
    reports.append(OracleReport("sigma-star regression (n=100,p=10)", sig, 0.15434713018702052, 1e-12))
    reports.append(OracleReport("residual-term regression (n=100,p=10)", cn, 2.7065129544123673, 1e-12))

    # mixture-loss oracle self-check on an analytic quadratic loss
    value, d_pi, d_alpha = exact_mixture_loss_and_grads(lambda a: a**2, 0.6, 0.8)
    reports.append(OracleReport("mixture oracle dpi on a^2", d_pi, 0.8**2 / 3.0, 1e-6))
    reports.append(OracleReport("mixture oracle dalpha on a^2", d_alpha, 2.0 * 0.6 * 0.8 / 3.0, 1e-5))
    return reports
