"""Asymptotic adversarial risk of robust-ERM random features regression.

The limit risk is read off the saddle point of a five-variable
convex-concave objective R(alpha, tau_g, beta, gamma, tau_q): minimised
over (alpha, tau_g), maximised over (beta, gamma, tau_q).

The solver works in log coordinates.  In the overparameterised regime the
maximising variables shrink like eps**2 as the adversary budget goes to
zero, so near the eps floor they sit many orders of magnitude below one.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize

from . import special_math as sm

log = logging.getLogger(__name__)

EPS_FLOOR = 1e-7
BOX_LOW = 1e-6
BOX_HIGH = 50.0
# Positivity floor for tau_g and the maximising block.  beta, gamma and
# tau_q shrink like eps**2 when N > n; tau_g goes to zero where the robust
# estimator collapses to zero.
ZERO_FLOOR = 1e-30
BRANCH_HYSTERESIS = 1e-12

_NAMES = ("alpha", "tau_g", "beta", "gamma", "tau_q")

_X0_STARTS = ((1.0, 1.0), (0.5, 2.0), (2.0, 0.5))
_Y0_STARTS = ((1.0, 1.0, 1.0), (0.5, 0.5, 2.0), (2.0, 2.0, 0.5))


class SolverError(RuntimeError):
    """The saddle solver failed; ``best`` holds the best iterate found."""

    def __init__(self, msg, best=None):
        super().__init__(msg)
        self.best = best


@dataclass(frozen=True)
class TheoryPoint:
    psi1: float
    psi2: float
    eps: float
    tau2: float
    sigma2: float = field(init=False)

    def __post_init__(self):
        if not (self.psi1 > 0 and self.psi2 > 0):
            raise sm.DomainError("psi1 and psi2 must be positive")
        if not (self.eps >= 0 and self.tau2 >= 0):
            raise sm.DomainError("eps and tau2 must be nonnegative")
        if self.eps < EPS_FLOOR:
            object.__setattr__(self, "eps", EPS_FLOOR)
        object.__setattr__(self, "sigma2", sm.sigma_sq_effective(self.tau2, self.psi1))

    @property
    def c0(self) -> float:
        """tau^2 + 1 - sigma^2, the signal energy captured by the linear part."""
        return self.tau2 + 1.0 - self.sigma2


@dataclass
class SolverConfig:
    tol: float = 1e-7
    max_iters: int = 500
    inner_tol: float = 1e-9
    nested_tol: float = 1e-6
    anchor_eps: float = 0.5
    continuation_ratio: float = 10.0
    starts: int = 3
    newton_iters: int = 30


@dataclass
class SaddlePoint:
    alpha: float
    tau_g: float
    beta: float
    gamma: float
    tau_q: float
    lambda_star: float
    nu_star: float
    objective: float
    grad_norm: float
    converged: bool
    start_spread: float = 0.0
    starts_converged: int = 1

    @property
    def rho(self) -> float:
        return self.tau_g / self.beta

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha, self.tau_g, self.beta, self.gamma, self.tau_q])


@dataclass
class RiskPrediction:
    point: TheoryPoint
    saddle: SaddlePoint
    adversarial_risk: float
    standard_component: float


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------

@dataclass
class _Eval:
    value: float
    grad: np.ndarray  # w.r.t. (alpha, tau_g, beta, gamma, tau_q)
    lam: float
    nu: float
    gamma: float


def _evaluate(z, pt: TheoryPoint, nu=None) -> _Eval:
    """R and its gradient at (alpha, tau_g, beta, gamma, tau_q).

    The inner sup over lambda and min over nu are handled by the envelope
    theorem: derivatives are partials of the inner objective at the optimum.
    When ``nu`` is given, ``z[3]`` is ignored and gamma is the value whose
    nu* equals ``nu`` (the solver's parametrisation of gamma).
    """
    alpha, tau_g, beta, gamma, tau_q = (float(v) for v in z)
    eps, psi1, psi2 = pt.eps, pt.psi1, pt.psi2
    c0 = pt.c0
    omega2 = alpha * alpha + pt.sigma2
    omega = math.sqrt(omega2)
    tb = tau_g + beta
    rho = tau_g / beta

    value = tau_q * c0 / (2 * alpha) - alpha * tau_q / 2 + beta * tau_g * psi2 / 2
    value += beta * omega2 / (2 * tb)
    d_alpha = -tau_q * c0 / (2 * alpha ** 2) - tau_q / 2 + beta * alpha / tb
    d_taug = beta * psi2 / 2 - beta * omega2 / (2 * tb ** 2)
    d_beta = tau_g * psi2 / 2 + omega2 * tau_g / (2 * tb ** 2)
    d_gamma = 0.0
    d_tauq = c0 / (2 * alpha) - alpha / 2

    # Moreau-envelope remainder G(omega; rho, gamma).
    if nu is None:
        a = gamma * (rho + 1.0) / (eps * omega)
        on = a > sm.SQRT_2_OVER_PI + BRANCH_HYSTERESIS
        nu = sm.nu_star(a, rho) if on else 0.0
    else:
        nu = float(nu)
        a = sm.a_from_nu(nu, rho)
        gamma = a * eps * omega / (rho + 1.0)
        on = nu > 0.0
    if on:
        gs = (math.erf(nu / sm.SQRT2) - a * nu) / (2.0 * rho * (rho + 1.0))
        value += omega2 * gs
        # a + B(nu) collapses to nu (rho+1)/rho at the root.
        apb = nu * (rho + 1.0) / rho
        erfc = math.erfc(nu / sm.SQRT2)
        pdf = sm.SQRT_2_OVER_PI * math.exp(-0.5 * nu * nu)
        big_a = (1.0 - nu * pdf) + (nu * nu - 1.0) * erfc
        p_a = -omega2 * apb / (rho + 1.0) ** 2
        p_rho = omega2 * (-big_a * (2 * rho + 1) / (2 * rho ** 2 * (rho + 1) ** 2)
                          + apb ** 2 / (rho + 1) ** 3)
        p_omega = 2.0 * omega * gs
        d_rho = p_rho + p_a * gamma / (eps * omega)
        d_omega = p_omega - p_a * a / omega
        d_alpha += d_omega * alpha / omega
        d_taug += d_rho / beta
        d_beta -= d_rho * tau_g / beta ** 2
        d_gamma += p_a * (rho + 1.0) / (eps * omega)

    # -(alpha/tau_q) F(tau_q/alpha, beta, psi1, gamma).
    amp = tau_q / alpha
    fval, lam = sm.f_sup(amp, beta, psi1, gamma)
    if lam > 0.0:
        s = sm._stieltjes(2 * lam / math.pi - 1.0, psi1)
        f_a = lam * psi1 * amp * (1.0 + (1.0 - 2 * lam / math.pi) * s)
        f_b = lam * psi1 * beta * (1.0 + (2.0 / math.pi) * (1.0 - lam) * s)
        f_g = -lam * gamma / (1.0 - lam)
        value -= fval / amp
        d_alpha += -fval / tau_q + f_a / alpha
        d_tauq += alpha * fval / tau_q ** 2 - f_a / tau_q
        d_beta -= f_b / amp
        d_gamma -= f_g / amp

    if not math.isfinite(value):
        raise sm.DomainError(f"objective is not finite at {tuple(z)}")
    return _Eval(value, np.array([d_alpha, d_taug, d_beta, d_gamma, d_tauq]), lam, nu, gamma)


def _check_args(alpha, tau_g, beta, gamma, tau_q):
    if not (min(alpha, tau_g, beta, tau_q) > 0 and gamma >= 0):
        raise sm.DomainError("alpha, tau_g, beta, tau_q must be positive and gamma >= 0")


def objective_r(alpha, tau_g, beta, gamma, tau_q, point: TheoryPoint) -> float:
    """The saddle objective R."""
    _check_args(alpha, tau_g, beta, gamma, tau_q)
    return _evaluate((alpha, tau_g, beta, gamma, tau_q), point).value


def objective_grad(alpha, tau_g, beta, gamma, tau_q, point: TheoryPoint) -> np.ndarray:
    """Gradient of R with respect to (alpha, tau_g, beta, gamma, tau_q)."""
    _check_args(alpha, tau_g, beta, gamma, tau_q)
    return _evaluate((alpha, tau_g, beta, gamma, tau_q), point).grad


# ---------------------------------------------------------------------------
# Saddle solver
# ---------------------------------------------------------------------------
#
# Three stages per start:
#   1. nested L-BFGS-B in native coordinates at an anchor budget
#      max(eps, anchor_eps), where the saddle is well inside the box;
#   2. continuation down to eps along a geometric path, each step a Newton
#      solve in log coordinates started from a log-log extrapolation;
#   3. Newton polishing plus a one-dimensional gamma refinement at eps.
# Stages 2 and 3 use u = log(alpha, tau_g, beta, nu, tau_q).  Logs are
# needed because beta, gamma and tau_q scale like eps**2 in the
# overparameterised regime.  gamma is traded for nu = nu*(a, rho): the
# optimum in gamma sits just above the point where G switches on, with a
# jump in curvature of order 1/eps**2 there, while the map gamma -> nu is
# smooth and sends that point to log nu = -inf.

_NU_MAX = 1e15
_LOG_LO = np.log([BOX_LOW, ZERO_FLOOR, ZERO_FLOOR, ZERO_FLOOR, ZERO_FLOOR])
_LOG_HI = np.log([BOX_HIGH, BOX_HIGH, BOX_HIGH, _NU_MAX, BOX_HIGH])
# tau_g and gamma may legitimately rest at zero; the others may not.
_ZERO_OK = np.array([False, True, False, True, False])
_IS_MAX = np.array([False, False, True, True, True])


def _inner_min(y, x0, pt, tol):
    """min over (alpha, tau_g) for fixed (beta, g, tau_q), g = gamma / eps."""
    beta, g, tau_q = y
    gamma = g * pt.eps

    def fun(x):
        ev = _evaluate((x[0], x[1], beta, gamma, tau_q), pt)
        return ev.value, ev.grad[:2]

    res = optimize.minimize(fun, x0, jac=True, method="L-BFGS-B",
                            bounds=[(BOX_LOW, BOX_HIGH)] * 2,
                            options={"ftol": 1e-15, "gtol": tol, "maxiter": 500})
    return res.x


def _nested(z0, pt, cfg):
    """Nested L-BFGS-B on the native box; gamma is carried as gamma / eps."""
    z0 = np.asarray(z0, float)
    state = {"x": z0[:2]}
    scale = np.array([1.0, pt.eps, 1.0])

    def neg_phi(y):
        x = _inner_min(y, state["x"], pt, cfg.inner_tol)
        state["x"] = x
        ev = _evaluate((x[0], x[1], y[0], y[1] * pt.eps, y[2]), pt)
        return -ev.value, -ev.grad[2:] * scale

    bounds = [(BOX_LOW, BOX_HIGH), (0.0, BOX_HIGH / pt.eps), (BOX_LOW, BOX_HIGH)]
    lo, hi = [b[0] for b in bounds], [b[1] for b in bounds]
    for shrink in (1.0, 0.5):
        # The outer ascent can be drawn into the spurious corner alpha -> 50,
        # beta -> floor; a shifted start for tau_q avoids it.
        y0 = np.clip(z0[2:] / scale * [1.0, 1.0, shrink], lo, hi)
        state["x"] = z0[:2]
        res = optimize.minimize(neg_phi, y0, jac=True, method="L-BFGS-B", bounds=bounds,
                                options={"ftol": 1e-15, "gtol": cfg.nested_tol,
                                         "maxiter": cfg.max_iters})
        x = _inner_min(res.x, state["x"], pt, cfg.inner_tol)
        if x[0] < BOX_HIGH * (1.0 - 1e-9):
            break
    return np.concatenate([x, res.x * scale])


def _to_log(z, pt):
    """Native (alpha, tau_g, beta, gamma, tau_q) to solver coordinates."""
    z = np.array(z, float)
    omega = math.sqrt(z[0] ** 2 + pt.sigma2)
    rho = z[1] / z[2]
    a = z[3] * (rho + 1.0) / (pt.eps * omega)
    # Off the G branch the maximiser in gamma is never interior, so seed nu
    # small and let the one-dimensional refinement place it.
    z[3] = sm.nu_star(a, rho) if a > sm.SQRT_2_OVER_PI else 0.0
    if z[3] <= 0.0:
        z[3] = 1e-3 * min(1.0, pt.eps)
    return np.clip(np.log(z), _LOG_LO, _LOG_HI)


def _residual(u, pt):
    """Projected gradient, balanced between the two blocks.

    At the floor, a component is dropped when the gradient points out of
    the feasible set (descent for a minimising variable, ascent for a
    maximising one would need a negative value).
    """
    z = np.exp(u)
    ev = _evaluate(z, pt, nu=z[3])
    r = ev.grad.copy()
    at_lo = u <= _LOG_LO + 1e-9
    blocked = at_lo & np.where(_IS_MAX, r < 0, r > 0)
    r[blocked] = 0.0
    # R is close to linear in the maximising block when that block is
    # small, so the minimising block's gradient carries a factor beta.
    r[:2] /= min(1.0, z[2])
    return r, ev


def _newton(u, pt, cfg):
    """Newton iterations on grad R = 0, Jacobian by differences in u.

    Steps are accepted only when they reduce the gradient norm, so the
    result is never worse than the starting iterate.
    """
    u = np.array(u, float)
    res, _ = _residual(u, pt)
    best = float(np.linalg.norm(res))
    h = 1e-6
    for _ in range(cfg.newton_iters):
        if best < 1e-3 * cfg.tol:
            break
        free = np.flatnonzero((res != 0.0) | (u > _LOG_LO + 1e-9))
        jac = np.empty((5, free.size))
        for k, j in enumerate(free):
            up, um = u.copy(), u.copy()
            up[j] += h
            um[j] -= h
            jac[:, k] = (_residual(up, pt)[0] - _residual(um, pt)[0]) / (2 * h)
        step = np.linalg.lstsq(jac[free], -res[free], rcond=None)[0]
        big = np.max(np.abs(step))
        if big > 2.0:
            step *= 2.0 / big
        improved = False
        t = 1.0
        for _ in range(30):
            cand = u.copy()
            cand[free] = np.clip(u[free] + t * step, _LOG_LO[free], _LOG_HI[free])
            try:
                cres, _ = _residual(cand, pt)
            except (sm.DomainError, ValueError):
                t *= 0.5
                continue
            cn = float(np.linalg.norm(cres))
            if cn < best:
                u, res, best = cand, cres, cn
                improved = True
                break
            t *= 0.5
        if not improved:
            break
    return u


def _refine_nu(u, pt):
    """Solve dR/dgamma = 0 along nu alone, by bisection in log nu.

    The other coordinates are held fixed; gamma moves with nu.  Newton
    handles the coupling, this pass only removes the stiff direction.
    """
    def dg(lnu):
        uu = u.copy()
        uu[3] = lnu
        z = np.exp(uu)
        return _evaluate(z, pt, nu=z[3]).grad[3]

    l0 = u[3]
    d0 = dg(l0)
    if d0 == 0.0:
        return u
    lo = hi = l0
    if d0 > 0:
        hi = l0 + 1.0
        while hi < _LOG_HI[3] and dg(hi) > 0:
            lo, hi = hi, hi + 1.0
        hi = min(hi, _LOG_HI[3])
    else:
        lo = l0 - 1.0
        while lo > _LOG_LO[3] and dg(lo) < 0:
            hi, lo = lo, lo - 1.0
        lo = max(lo, _LOG_LO[3])
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if dg(mid) > 0:
            lo = mid
        else:
            hi = mid
    u = u.copy()
    u[3] = 0.5 * (lo + hi)
    return u


def _polish(u, pt, cfg):
    # The nu pass can undo a tight Newton solve, so keep the best iterate.
    best_u, best = u, _grad_norm(u, pt)
    for _ in range(3):
        for step in (_newton, _refine_nu):
            u = step(u, pt, cfg) if step is _newton else step(u, pt)
            gn = _grad_norm(u, pt)
            if gn < best:
                best_u, best = u, gn
        if best < 1e-2 * cfg.tol:
            break
    return best_u


def _grad_norm(u, pt) -> float:
    return float(np.linalg.norm(_residual(u, pt)[0]))


def _continue(u, eps_from, pt, cfg):
    """Track the saddle from eps_from down to pt.eps."""
    n = max(1, math.ceil(math.log(eps_from / pt.eps) / math.log(cfg.continuation_ratio)))
    path = np.geomspace(eps_from, pt.eps, n + 1)[1:]
    hist = [(math.log(eps_from), u)]
    for e in path:
        pe = replace(pt, eps=float(e)) if e != pt.eps else pt
        le = math.log(e)
        guesses = [hist[-1][1]]
        if len(hist) > 1:
            (l0, u0), (l1, u1) = hist[-2], hist[-1]
            guesses.insert(0, np.clip(u1 + (u1 - u0) * (le - l1) / (l1 - l0), _LOG_LO, _LOG_HI))
        best_u, best_gn = None, math.inf
        for guess in guesses:
            cand = _polish(guess, pe, cfg)
            gn = _grad_norm(cand, pe)
            if gn < best_gn:
                best_u, best_gn = cand, gn
            if gn < cfg.tol:
                break
        hist.append((le, best_u))
    return hist[-1][1]


def _finish(u, pt, tol) -> SaddlePoint:
    res, ev = _residual(u, pt)
    z = np.exp(u)
    gn = float(np.linalg.norm(res))
    return SaddlePoint(alpha=float(z[0]), tau_g=float(z[1]), beta=float(z[2]),
                       gamma=float(ev.gamma), tau_q=float(z[4]),
                       lambda_star=float(ev.lam), nu_star=float(ev.nu),
                       objective=float(ev.value), grad_norm=gn, converged=gn < tol)


def _solve_cold(z0, pt, cfg) -> SaddlePoint:
    # The nested ascent occasionally settles on a spurious boundary point;
    # fall back to nearby starts (tau_q halved, then pulled toward 1).
    z0 = np.asarray(z0, float)
    best = None
    for start in (z0, z0 * [1, 1, 1, 1, 0.5], np.sqrt(z0)):
        s = _solve_cold_once(start, pt, cfg)
        if s.converged:
            return s
        if best is None or s.grad_norm < best.grad_norm:
            best = s
    return best


def _solve_cold_once(z0, pt, cfg) -> SaddlePoint:
    anchor = max(pt.eps, cfg.anchor_eps)
    while True:
        pa = pt if anchor <= pt.eps else replace(pt, eps=anchor)
        u = _polish(_to_log(_nested(z0, pa, cfg), pa), pa, cfg)
        # Continuation cannot leave the collapsed branch (tau_g -> 0, the
        # zero estimator), so anchor lower until the branch is left behind.
        if pa is pt or u[1] > math.log(BOX_LOW):
            break
        anchor = max(anchor / 10.0, pt.eps)
    if pa is not pt:
        u = _polish(_continue(u, anchor, pt, cfg), pt, cfg)
    return _finish(u, pt, cfg.tol)


def _solve_warm(z0, pt, cfg) -> SaddlePoint:
    return _finish(_polish(_to_log(z0, pt), pt, cfg), pt, cfg.tol)


def _pinned(s: SaddlePoint):
    z = s.as_array()
    lo = np.array([BOX_LOW, ZERO_FLOOR, ZERO_FLOOR, ZERO_FLOOR, ZERO_FLOOR])
    hi = np.full(5, BOX_HIGH)
    return [name for name, v, a, b, zok in zip(_NAMES, z, lo, hi, _ZERO_OK)
            if (v <= a * (1 + 1e-6) and not zok) or v >= b * (1 - 1e-9)]


def _spread(solutions) -> float:
    """Largest disagreement in (alpha, tau_g/beta) across solutions.

    Differences are measured relative to max(|value|, 1): relative for the
    huge tau_g/beta of the overparameterised regime, absolute near zero.
    """
    if len(solutions) < 2:
        return 0.0
    keys = np.array([[s.alpha, s.rho] for s in solutions])
    return float(np.max(np.abs(keys - keys[0]) / np.maximum(np.abs(keys[0]), 1.0)))


def solve_saddle(point: TheoryPoint, cfg: SolverConfig | None = None,
                 warm: SaddlePoint | None = None) -> SaddlePoint:
    """Saddle point of R.

    Runs ``cfg.starts`` deterministic interior starts and returns the
    converged one with the smallest gradient norm.  A ``warm`` saddle (from
    a neighbouring point) is polished directly and replaces the first start
    when it converges.  Relative disagreement between converged starts in
    (alpha, tau_g/beta) beyond 1e-4 raises a warning; only those two
    coordinates are unique.
    """
    cfg = cfg or SolverConfig()
    jobs = []
    if warm is not None:
        jobs.append((_solve_warm, warm.as_array()))
    for k in range(cfg.starts):
        (b, g, tq), (al, tg) = _Y0_STARTS[k % 3], _X0_STARTS[k % 3]
        jobs.append((_solve_cold, np.array([al, tg, b, g, tq])))

    solutions = []
    for fn, z0 in jobs:
        if warm is not None and fn is _solve_cold and len(solutions) >= cfg.starts:
            break
        try:
            sol = fn(z0, point, cfg)
        except (sm.DomainError, ValueError) as exc:
            log.debug("start %s failed: %s", z0, exc)
            continue
        if fn is _solve_warm and not (sol.converged and not _pinned(sol)):
            continue
        solutions.append(sol)
    if not solutions:
        raise SolverError(f"no start produced a finite iterate at {point}")

    good = [s for s in solutions if s.converged and not _pinned(s)]
    best = min(good or solutions, key=lambda s: s.grad_norm)
    best.start_spread = _spread(good)
    best.starts_converged = len(good)
    if best.start_spread > 1e-4:
        warnings.warn(f"starts disagree on (alpha, tau_g/beta) by "
                      f"{best.start_spread:.2e} at {point}")

    pinned = _pinned(best)
    if pinned:
        raise SolverError(f"solution pins the box bound for {pinned} at {point}", best)
    if not best.converged:
        raise SolverError(f"grad norm {best.grad_norm:.3e} above tol {cfg.tol:g} at {point}",
                          best)
    return best


def risk_from_saddle(point: TheoryPoint, saddle: SaddlePoint) -> RiskPrediction:
    omega2 = saddle.alpha ** 2 + point.sigma2
    r = saddle.beta * saddle.nu_star / saddle.tau_g
    risk = omega2 * (1.0 + r * r + 2.0 * sm.SQRT_2_OVER_PI * r)
    return RiskPrediction(point=point, saddle=saddle, adversarial_risk=risk,
                          standard_component=omega2)


def predict_adversarial_risk(point: TheoryPoint, cfg: SolverConfig | None = None,
                             warm: SaddlePoint | None = None) -> RiskPrediction:
    """Limit adversarial risk of the robust-ERM estimator at ``point``."""
    return risk_from_saddle(point, solve_saddle(point, cfg, warm))


@dataclass
class SweepRow:
    point: TheoryPoint
    prediction: RiskPrediction | None
    error: str = ""


def sweep_theory(points, cfg: SolverConfig | None = None, warm_start: bool = True):
    """Solve a sequence of points, optionally warm-starting each from the last.

    Failures are recorded per row and do not stop the sweep.
    """
    points = list(points)
    if not points:
        raise ValueError("empty grid")
    rows = []
    prev = None
    for pt in points:
        try:
            pred = predict_adversarial_risk(pt, cfg, prev if warm_start else None)
            rows.append(SweepRow(pt, pred))
            prev = pred.saddle
        except SolverError as exc:
            rows.append(SweepRow(pt, None, str(exc)))
            if exc.best is not None:
                prev = exc.best
    return rows


def grid_points(psi1_values, psi2, eps, tau2):
    return [TheoryPoint(float(p), psi2, eps, tau2) for p in psi1_values]


def with_eps(point: TheoryPoint, eps: float) -> TheoryPoint:
    return TheoryPoint(point.psi1, point.psi2, eps, point.tau2)


__all__ = [
    "TheoryPoint", "SolverConfig", "SaddlePoint", "RiskPrediction", "SolverError",
    "objective_r", "objective_grad", "solve_saddle", "predict_adversarial_risk",
    "risk_from_saddle", "sweep_theory", "grid_points", "EPS_FLOOR",
]
