"""Adversarial and standard risk of a trained random-features model.

Three routes are provided: the Gaussian-equivalent closed form, Monte Carlo
with the closed-form adversary, and Monte Carlo with a projected gradient
ascent oracle. Each returns a :class:`RiskReport`.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .simulation import MU1, MU2, FeatureMap, KernelJ, sigma, worst_case_perturbations

__all__ = [
    "RiskMethod",
    "MCOracle",
    "RiskReport",
    "DEFAULT_N_TEST",
    "DEFAULT_C0",
    "constraint_ratios",
    "m_statistic",
    "analytic_adversarial_risk",
    "mc_adversarial_risk",
    "pgd_inner_max",
    "pgd_inner_max_batch",
]

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
DEFAULT_N_TEST = 2000
DEFAULT_C0 = 10.0


class RiskMethod(str, enum.Enum):
    ANALYTIC_GE = "analytic_ge"
    MC_CLOSED_FORM = "mc_closed_form"
    MC_PGD = "mc_pgd"


class MCOracle(str, enum.Enum):
    CLOSED_FORM = "closed_form"
    PGD = "pgd"


@dataclass(frozen=True)
class RiskReport:
    adversarial_risk: float
    standard_risk: float
    method: RiskMethod
    n_test: int
    standard_error: float
    m_theta: float
    j_norm_theta: float
    # theta is outside the set where the Gaussian-equivalent formula is
    # known to hold; the numbers are still reported
    constraint_violated: bool = False


def constraint_ratios(theta, d: int) -> tuple[float, float, float]:
    """Scale-free sizes of theta: sup-norm, l2-norm and |sum| ratios.

    All three at most C0 means theta lies in the constraint set on which the
    Gaussian-equivalent formula is known to hold.
    """
    theta = np.asarray(theta, dtype=float)
    logd = math.log(max(d, 3))
    return (
        float(np.max(np.abs(theta), initial=0.0)) / math.sqrt(logd / d),
        float(np.linalg.norm(theta)),
        abs(float(theta.sum())) / math.sqrt(d / logd),
    )


def _violated(theta, fmap: FeatureMap, c0: float) -> bool:
    return max(constraint_ratios(theta, fmap.d)) > c0


def m_statistic(theta, fmap: FeatureMap, beta, tau2: float) -> float:
    """Standard-risk square root: tau2 + ||W'theta/2 - beta||^2 + mu2^2 ||theta||^2."""
    theta = np.asarray(theta, dtype=float)
    bias = MU1 * (fmap.W.T @ theta) - np.asarray(beta, dtype=float)
    m2 = tau2 + float(bias @ bias) + MU2 * MU2 * float(theta @ theta)
    return math.sqrt(max(m2, 0.0))


def analytic_adversarial_risk(theta, fmap: FeatureMap, kernel: KernelJ, beta,
                              tau2: float, eps: float, c0: float = DEFAULT_C0) -> RiskReport:
    """Gaussian-equivalent adversarial risk M^2 + eps^2 ||J theta||^2 + 2 sqrt(2/pi) eps M ||J theta||."""
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    if kernel.gram.shape != (fmap.N, fmap.N):
        raise ValueError("kernel does not match the feature map")
    m = m_statistic(theta, fmap, beta, tau2)
    j = kernel.norm(np.asarray(theta, dtype=float))
    ar = m * m + (eps * j) ** 2 + 2.0 * SQRT_2_OVER_PI * eps * m * j
    return RiskReport(ar, m * m, RiskMethod.ANALYTIC_GE, 0, 0.0, m, j,
                      _violated(theta, fmap, c0))


def _pgd_objective(theta, W, X, y, Delta):
    pre = (X + Delta) @ W.T
    r = y - sigma(pre) @ theta
    return r, pre


def pgd_inner_max_batch(theta, fmap: FeatureMap, X, y, eps: float, steps: int = 200,
                        restarts: int = 3, rng: np.random.Generator | None = None):
    """Projected gradient ascent on (y - theta' sigma(W(x + delta)))^2, row-wise.

    Normalized steps of length eps/20 with projection onto the eps-ball.
    Restarts begin at 0, at the closed-form direction +eps g/||g|| and at a
    random point of the sphere. Returns the best iterate seen for each row
    as ``(Delta, attained)`` with ``attained`` the absolute residual.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    theta = np.asarray(theta, dtype=float)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    W = fmap.W
    rng = np.random.default_rng(0) if rng is None else rng
    step = eps / 20.0

    r0, pre0 = _pgd_objective(theta, W, X, y, 0.0)
    best = np.abs(r0)
    best_delta = np.zeros_like(X)

    G = ((pre0 > 0) * theta) @ W
    gn = np.linalg.norm(G, axis=1, keepdims=True)
    along_g = eps * np.divide(G, gn, out=np.zeros_like(G), where=gn > 0)
    starts = [np.zeros_like(X), along_g]
    for _ in range(max(restarts - 2, 0)):
        z = rng.standard_normal(X.shape)
        starts.append(eps * z / np.linalg.norm(z, axis=1, keepdims=True))

    for delta in starts[:restarts]:
        delta = delta.copy()
        for _ in range(steps + 1):
            r, pre = _pgd_objective(theta, W, X, y, delta)
            val = np.abs(r)
            up = val > best
            best[up] = val[up]
            best_delta[up] = delta[up]
            # ascent direction of r^2 is -r * grad_x(theta' sigma)
            grad = -r[:, None] * (((pre > 0) * theta) @ W)
            norm = np.linalg.norm(grad, axis=1, keepdims=True)
            delta += step * np.divide(grad, norm, out=np.zeros_like(grad), where=norm > 0)
            dn = np.linalg.norm(delta, axis=1, keepdims=True)
            delta *= np.minimum(1.0, eps / np.maximum(dn, 1e-300))
    return best_delta, best


def pgd_inner_max(theta, fmap: FeatureMap, x, y: float, eps: float, steps: int = 200,
                  restarts: int = 3, rng: np.random.Generator | None = None):
    """Single-point version of :func:`pgd_inner_max_batch`."""
    delta, att = pgd_inner_max_batch(theta, fmap, np.atleast_2d(x), [y], eps, steps,
                                     restarts, rng)
    return delta[0], float(att[0])


def mc_adversarial_risk(theta, fmap: FeatureMap, beta, tau2: float, eps: float,
                        n_test: int = DEFAULT_N_TEST, rng: np.random.Generator | None = None,
                        oracle: MCOracle | str = MCOracle.CLOSED_FORM,
                        kernel: KernelJ | None = None, c0: float = DEFAULT_C0,
                        batch: int = 500) -> RiskReport:
    """Monte Carlo adversarial risk on fresh test draws from the linear model."""
    if n_test < 1:
        raise ValueError("n_test must be at least 1")
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    oracle = MCOracle(oracle)
    rng = np.random.default_rng() if rng is None else rng
    theta = np.asarray(theta, dtype=float)
    beta = np.asarray(beta, dtype=float)
    X = rng.standard_normal((n_test, fmap.d))
    y = X @ beta
    if tau2 > 0:
        y = y + math.sqrt(tau2) * rng.standard_normal(n_test)

    adv = np.empty(n_test)
    std = np.empty(n_test)
    for lo in range(0, n_test, batch):
        sl = slice(lo, lo + batch)
        r = y[sl] - sigma(X[sl] @ fmap.W.T) @ theta
        std[sl] = r * r
        if eps == 0:
            adv[sl] = r * r
        elif oracle is MCOracle.CLOSED_FORM:
            _, att, _, _ = worst_case_perturbations(theta, fmap, X[sl], y[sl], eps)
            adv[sl] = att * att
        else:
            _, att = pgd_inner_max_batch(theta, fmap, X[sl], y[sl], eps, rng=rng)
            adv[sl] = att * att

    se = float(np.std(adv, ddof=1) / math.sqrt(n_test)) if n_test > 1 else 0.0
    method = RiskMethod.MC_CLOSED_FORM if oracle is MCOracle.CLOSED_FORM else RiskMethod.MC_PGD
    j = kernel.norm(theta) if kernel is not None else float("nan")
    return RiskReport(float(adv.mean()), float(std.mean()), method, n_test, se,
                      m_statistic(theta, fmap, beta, tau2), j, _violated(theta, fmap, c0))
