"""Scalar special functions for the asymptotic adversarial-risk formula.

Everything here is a pure function of its arguments.  Scalar paths use the
``math`` module because the saddle solver calls them millions of times;
the array-valued entry points are thin numpy wrappers.
"""
from __future__ import annotations

import functools
import math

import numpy as np
from scipy import optimize

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
SQRT_2PI = math.sqrt(2.0 * math.pi)
SQRT2 = math.sqrt(2.0)

# Hermite coefficients of the shifted ReLU, max(x, 0) - 1/sqrt(2 pi).
MU0 = 0.0
MU1 = 0.5
MU2 = math.sqrt(0.25 - 1.0 / (2.0 * math.pi))

LAMBDA_MAX = 1.0 - 1e-9
_COARSE_POINTS = 64
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
_ERF_ONE_OVER_SQRT2 = math.erf(1.0 / SQRT2)


class DomainError(ValueError):
    """Argument outside the domain where a formula is defined."""


class NoSolutionError(DomainError):
    """The nu* root equation has no nonnegative solution."""


# ---------------------------------------------------------------------------
# Marchenko-Pastur Stieltjes transform
# ---------------------------------------------------------------------------

def _stieltjes(z: float, psi1: float) -> float:
    b = 1.0 - psi1 - z
    disc = b * b - 4.0 * psi1 * z
    if disc < 0.0:
        if disc < -1e-14:
            raise DomainError(f"negative discriminant {disc!r} at z={z}, psi1={psi1}")
        disc = 0.0
    root = math.sqrt(disc)
    # Both branches are the same root; pick the one without cancellation.
    if b >= 0.0:
        s = -2.0 / (b + root)
    else:
        s = (root - b) / (2.0 * psi1 * z)
    # One Newton step on psi1 z S^2 + b S + 1 = 0 removes the last ulps.
    a2 = psi1 * z
    res = (a2 * s + b) * s + 1.0
    der = 2.0 * a2 * s + b
    if der != 0.0:
        s -= res / der
    return s


def stieltjes_mp(z, psi1):
    """Stieltjes transform S(z; psi1) of the Marchenko-Pastur law of W W^T.

    Defined for ``z < 0`` and ``psi1 > 0``; the value is negative.  Accepts
    scalars or arrays (broadcast against each other).
    """
    if np.ndim(z) == 0 and np.ndim(psi1) == 0:
        z = float(z)
        psi1 = float(psi1)
        if not (z < 0.0):
            raise DomainError(f"z must be negative, got {z}")
        if not (psi1 > 0.0) or math.isinf(psi1):
            raise DomainError(f"psi1 must be positive and finite, got {psi1}")
        return _stieltjes(z, psi1)

    z, psi1 = np.broadcast_arrays(np.asarray(z, float), np.asarray(psi1, float))
    if np.any(z >= 0.0):
        raise DomainError("z must be negative")
    if np.any(psi1 <= 0.0) or not np.all(np.isfinite(psi1)):
        raise DomainError("psi1 must be positive and finite")
    b = 1.0 - psi1 - z
    disc = b * b - 4.0 * psi1 * z
    if np.any(disc < -1e-14):
        raise DomainError("negative discriminant")
    root = np.sqrt(np.maximum(disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(b >= 0.0, -2.0 / (b + root), (root - b) / (2.0 * psi1 * z))
    a2 = psi1 * z
    res = (a2 * s + b) * s + 1.0
    der = 2.0 * a2 * s + b
    return s - np.where(der != 0.0, res / np.where(der != 0.0, der, 1.0), 0.0)


def sigma_sq_effective(tau2: float, psi1: float) -> float:
    """Effective noise level sigma^2 of the equivalent Gaussian model.

    This is the residual variance left after regressing the target on the
    linear part of the random features, plus the label noise tau2.
    """
    if tau2 < 0.0:
        raise DomainError(f"tau2 must be nonnegative, got {tau2}")
    if not (psi1 > 0.0):
        raise DomainError(f"psi1 must be positive, got {psi1}")
    s = _stieltjes(2.0 / math.pi - 1.0, float(psi1))
    out = tau2 + 1.0 - psi1 * (1.0 + (1.0 - 2.0 / math.pi) * s)
    if out < tau2 - 1e-9 or out > tau2 + 1.0 + 1e-9:
        raise DomainError(f"sigma^2={out} outside [tau2, tau2 + 1]")
    return min(max(out, tau2), tau2 + 1.0)


# ---------------------------------------------------------------------------
# F: the lambda-sup coming from the quadratic trust-region step
# ---------------------------------------------------------------------------

def _f_objective(lam: float, a2: float, b2: float, psi1: float, gamma2: float) -> float:
    s = _stieltjes(2.0 * lam / math.pi - 1.0, psi1)
    inner = a2 + b2 + (a2 * (1.0 - 2.0 * lam / math.pi) + (2.0 / math.pi) * (1.0 - lam) * b2) * s
    return 0.5 * lam * psi1 * inner - lam * gamma2 / (2.0 * (1.0 - lam))


def _f_slope(lam: float, a2: float, b2: float, psi1: float, gamma2: float) -> float:
    """d/dlambda of ``_f_objective``."""
    z = 2.0 * lam / math.pi - 1.0
    s = _stieltjes(z, psi1)
    ds = (s - psi1 * s * s) / (2.0 * psi1 * z * s + 1.0 - psi1 - z)
    ca = 1.0 - 2.0 * lam / math.pi
    cb = (2.0 / math.pi) * (1.0 - lam)
    inner = a2 + b2 + (a2 * ca + b2 * cb) * s
    d_inner = (a2 + b2) * (-2.0 / math.pi) * s + (a2 * ca + b2 * cb) * ds * (2.0 / math.pi)
    return 0.5 * psi1 * (inner + lam * d_inner) - gamma2 / (2.0 * (1.0 - lam) ** 2)


def _polish_lambda(lam, width, a2, b2, psi1, g2):
    """Root of the slope near ``lam``; golden search stalls at ~sqrt(machine eps)."""
    for _ in range(4):
        p, q = max(lam - width, 0.0), min(lam + width, LAMBDA_MAX)
        sp, sq = _f_slope(p, a2, b2, psi1, g2), _f_slope(q, a2, b2, psi1, g2)
        if sp > 0.0 > sq:
            return optimize.brentq(_f_slope, p, q, args=(a2, b2, psi1, g2),
                                   xtol=1e-300, rtol=1e-15)
        if (p == 0.0 and sp <= 0.0) or (q == LAMBDA_MAX and sq >= 0.0):
            return None
        width *= 10.0
    return None


@functools.lru_cache(maxsize=4096)
def _f_scan_table(psi1: float):
    grid = np.linspace(0.0, LAMBDA_MAX, _COARSE_POINTS)
    s = stieltjes_mp(2.0 * grid / math.pi - 1.0, psi1)
    coef_a = 0.5 * grid * psi1 * (1.0 + (1.0 - 2.0 * grid / math.pi) * s)
    coef_b = 0.5 * grid * psi1 * (1.0 + (2.0 / math.pi) * (1.0 - grid) * s)
    coef_g = grid / (2.0 * (1.0 - grid))
    return grid, coef_a, coef_b, coef_g


def f_sup(a: float, b: float, psi1: float, gamma: float) -> tuple[float, float]:
    """Return ``(F, lambda_star)`` for F(a, b, psi1, gamma).

    The objective is unimodal in lambda on [0, 1): a 64-point scan brackets
    the maximiser, golden-section search refines it to 1e-10, and a root
    solve on the slope removes the last digits the function values cannot
    resolve.
    """
    if not (psi1 > 0.0):
        raise DomainError(f"psi1 must be positive, got {psi1}")
    a2, b2, g2 = a * a, b * b, gamma * gamma
    grid, coef_a, coef_b, coef_g = _f_scan_table(float(psi1))
    vals = a2 * coef_a + b2 * coef_b - g2 * coef_g
    i = int(np.argmax(vals))
    lo = float(grid[max(i - 1, 0)])
    hi = float(grid[min(i + 1, _COARSE_POINTS - 1)])

    x1 = hi - _GOLDEN * (hi - lo)
    x2 = lo + _GOLDEN * (hi - lo)
    f1 = _f_objective(x1, a2, b2, psi1, g2)
    f2 = _f_objective(x2, a2, b2, psi1, g2)
    while hi - lo > 1e-10:
        if f1 < f2:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + _GOLDEN * (hi - lo)
            f2 = _f_objective(x2, a2, b2, psi1, g2)
        else:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - _GOLDEN * (hi - lo)
            f1 = _f_objective(x1, a2, b2, psi1, g2)
    best_lam, best = (x1, f1) if f1 >= f2 else (x2, f2)
    # End points are not visited by the golden iterates.
    for lam in (lo, hi):
        val = _f_objective(lam, a2, b2, psi1, g2)
        if val > best:
            best_lam, best = lam, val
    if 0.0 < best_lam < LAMBDA_MAX:
        root = _polish_lambda(best_lam, 1e-9, a2, b2, psi1, g2)
        if root is not None:
            val = _f_objective(root, a2, b2, psi1, g2)
            if val >= best - 1e-14 * abs(best):
                best_lam, best = root, max(val, best)
    if best < 0.0:
        return 0.0, 0.0
    return float(best), float(best_lam)


def big_f(a: float, b: float, psi1: float, gamma: float) -> float:
    """F(a, b, psi1, gamma) = sup over lambda in [0, 1) (always >= 0)."""
    if gamma < 0.0:
        raise DomainError(f"gamma must be nonnegative, got {gamma}")
    return f_sup(a, b, psi1, gamma)[0]


# ---------------------------------------------------------------------------
# nu* and G: the Moreau-envelope part
# ---------------------------------------------------------------------------

def nu_residual(nu: float, a: float, rho: float) -> float:
    return (a - nu / rho - nu * math.erf(nu / SQRT2)
            - SQRT_2_OVER_PI * math.exp(-0.5 * nu * nu))


def nu_star(a: float, rho: float) -> float:
    """Unique nonnegative root of the nu* equation.

    The residual is strictly decreasing with derivative ``-1/rho - erf(nu/sqrt 2)``,
    positive at 0 iff ``a > sqrt(2/pi)`` and negative at ``a * rho``.  For
    nu >= 1 the residual is below ``a - nu (1/rho + erf(1/sqrt 2))``, which
    gives a tighter upper end when ``a * rho`` is large.
    """
    if not (rho > 0.0):
        raise DomainError(f"rho must be positive, got {rho}")
    r0 = a - SQRT_2_OVER_PI
    if r0 < 0.0:
        raise NoSolutionError(f"a={a} <= sqrt(2/pi): no positive root")
    if r0 == 0.0:
        return 0.0
    lo = 0.0
    hi = min(a * rho, max(1.0, a / (1.0 / rho + _ERF_ONE_OVER_SQRT2)))
    while hi - lo > 1e-8:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if nu_residual(mid, a, rho) > 0.0:
            lo = mid
        else:
            hi = mid
    nu = 0.5 * (lo + hi)
    for _ in range(2):
        nu -= nu_residual(nu, a, rho) / (-1.0 / rho - math.erf(nu / SQRT2))
    return max(nu, 0.0)


def a_from_nu(nu: float, rho: float) -> float:
    """Inverse of ``nu_star`` in ``a``: the ``a`` whose root is ``nu``."""
    if not (rho > 0.0) or nu < 0.0:
        raise DomainError(f"need rho > 0 and nu >= 0, got rho={rho}, nu={nu}")
    return nu / rho + nu * math.erf(nu / SQRT2) + SQRT_2_OVER_PI * math.exp(-0.5 * nu * nu)


def g_inner(t: float, a: float, rho: float) -> float:
    """Limit of G_n / (n omega^2) at threshold t = nu/omega, before minimising.

    ``G = omega^2 * min_t g_inner(t, a, rho)``.
    """
    erfc = math.erfc(t / SQRT2)
    pdf = SQRT_2_OVER_PI * math.exp(-0.5 * t * t)
    first = (1.0 - t * pdf) + (t * t - 1.0) * erfc
    second = max(a + t * erfc - pdf, 0.0)
    return first / (2.0 * rho * (rho + 1.0)) - second * second / (2.0 * (rho + 1.0) ** 2)


def g_scaled(a: float, rho: float) -> tuple[float, float]:
    """Return ``(G / omega^2, nu*)`` with the branch test folded in."""
    if a <= SQRT_2_OVER_PI:
        return 0.0, 0.0
    nu = nu_star(a, rho)
    return (math.erf(nu / SQRT2) - a * nu) / (2.0 * rho * (rho + 1.0)), nu


def big_g(omega: float, rho: float, gamma: float, eps: float) -> float:
    """G(omega; rho, gamma), the minimised Moreau-envelope remainder."""
    if rho <= 0.0 or gamma < 0.0 or eps <= 0.0 or omega < 0.0:
        raise DomainError("big_g needs omega >= 0, rho > 0, gamma >= 0, eps > 0")
    if omega == 0.0:
        return 0.0
    a = gamma * (rho + 1.0) / (eps * omega)
    return omega * omega * g_scaled(a, rho)[0]


def soft_threshold(x, nu):
    return np.sign(x) * np.maximum(np.abs(x) - nu, 0.0)


def moreau_envelope_soft_threshold(x, rho: float, gamma: float, eps: float) -> float:
    """Envelope e_f(x; rho) through its soft-threshold characterisation.

    Minimises the one-dimensional G_n(x; rho, gamma, nu) over nu >= 0.
    """
    x = np.asarray(x, float)
    n = x.size
    c = n * gamma / eps

    def gn(nu):
        st = soft_threshold(x, nu)
        pos = max(c - np.abs(st).sum() / (1.0 + rho), 0.0)
        return (np.sum((x - st) ** 2) / (2.0 * rho * (rho + 1.0))
                - pos * pos / (2.0 * n))

    top = float(np.max(np.abs(x))) if n else 0.0
    # gn is piecewise smooth in nu; scan, then refine around the best knot.
    grid = np.linspace(0.0, top, 2001)
    vals = np.array([gn(v) for v in grid])
    i = int(np.argmin(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    res = optimize.minimize_scalar(gn, bounds=(lo, hi), method="bounded",
                                   options={"xatol": 1e-13})
    best = min(vals[i], res.fun)
    return float(np.dot(x, x) / (2.0 * (rho + 1.0)) + best)


def moreau_envelope_oracle(x, rho: float, gamma: float, eps: float) -> float:
    """Envelope min_v f(v; gamma) + |x - v|^2 / (2 rho) by direct minimisation.

    ``f(v; gamma) = |v|^2/2 - (n gamma/eps - |v|_1)_+^2 / (2n)``.  The l1 norm
    is smoothed by splitting v = p - m with p, m >= 0; the split is exact at
    the optimum because the objective increases with |v|_1.  Independent of
    the soft-threshold characterisation, so usable as a check on it.
    """
    x = np.asarray(x, float)
    n = x.size
    if n == 0:
        return 0.0
    c = n * gamma / eps

    def fun(z):
        p, m = z[:n], z[n:]
        v = p - m
        l1 = p.sum() + m.sum()
        pos = max(c - l1, 0.0)
        r = x - v
        val = 0.5 * v @ v - pos * pos / (2.0 * n) + r @ r / (2.0 * rho)
        gv = v - r / rho
        gl1 = pos / n
        return val, np.concatenate([gv + gl1, -gv + gl1])

    v0 = x / (1.0 + rho)
    z0 = np.concatenate([np.maximum(v0, 0.0), np.maximum(-v0, 0.0)])
    res = optimize.minimize(fun, z0, jac=True, method="L-BFGS-B",
                            bounds=[(0.0, None)] * (2 * n),
                            options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 20000,
                                     "maxcor": 30})
    return float(res.fun)


def folded_normal_mean(m: float) -> float:
    """E|Z| for Z ~ N(0, m^2)."""
    if m < 0.0:
        raise DomainError(f"scale must be nonnegative, got {m}")
    return m * SQRT_2_OVER_PI
