"""Finite-size experiments for adversarially trained random-features models.

Data follow a noisy linear model with Gaussian inputs, the first layer is a
fixed matrix of unit-norm random weights, and only the second-layer vector
``theta`` is trained by full-batch gradient descent on a robust ERM loss.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import math
import zlib
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import optimize, sparse

__all__ = [
    "MU0",
    "MU1",
    "MU2",
    "LossVariant",
    "OptimizerConfig",
    "ExperimentConfig",
    "Dataset",
    "FeatureMap",
    "KernelJ",
    "TrainedModel",
    "TrainingDivergedError",
    "rng_stream",
    "sigma",
    "sample_sphere_rows",
    "gen_dataset",
    "features",
    "noisy_linear_features",
    "compute_kernel_j",
    "worst_case_perturbation",
    "worst_case_perturbations",
    "robust_loss_and_grad",
    "lipschitz_estimate",
    "train_robust_erm",
    "run_trial",
]

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Hermite coefficients of the shifted ReLU
MU0 = 0.0
MU1 = 0.5
MU2 = math.sqrt(0.25 - 1.0 / (2.0 * math.pi))


class LossVariant(str, enum.Enum):
    EXACT_MINIMAX = "exact_minimax"
    L_CIRCLE = "l_circle"
    L_DOUBLE_CIRCLE = "l_double_circle"


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss becomes NaN or infinite."""

    def __init__(self, message: str, trace: np.ndarray):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class OptimizerConfig:
    """Training settings.

    ``method="gd"`` is full-batch gradient descent with step
    ``step_scale / L`` and Armijo backtracking. ``method="lbfgs"`` runs
    L-BFGS on smoothed surrogates of the loss with the smoothing width
    shrinking by 10x per stage from ``mu_start`` to ``mu_final``; the step
    settings are then unused.
    """

    step_scale: float = 0.5
    max_iters: int = 50_000
    grad_tol: float = 1e-7
    backtracking: bool = True
    method: str = "lbfgs"
    mu_start: float = 1e-1
    mu_final: float = 1e-8

    def __post_init__(self):
        if self.method not in ("gd", "lbfgs"):
            raise ValueError("method must be 'gd' or 'lbfgs'")
        if not 0 < self.mu_final <= self.mu_start:
            raise ValueError("need 0 < mu_final <= mu_start")
        if not self.step_scale > 0:
            raise ValueError("step_scale must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not self.grad_tol >= 0:
            raise ValueError("grad_tol must be nonnegative")


@dataclass(frozen=True)
class ExperimentConfig:
    d: int
    n: int
    N: int
    eps: float
    tau2: float
    trials: int = 20
    seed: int = 0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    loss_variant: LossVariant = LossVariant.EXACT_MINIMAX

    def __post_init__(self):
        for name in ("d", "n", "N", "trials"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be at least 1")
        if not (math.isfinite(self.eps) and self.eps >= 0):
            raise ValueError("eps must be finite and nonnegative")
        if not (math.isfinite(self.tau2) and self.tau2 >= 0):
            raise ValueError("tau2 must be finite and nonnegative")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")
        object.__setattr__(self, "loss_variant", LossVariant(self.loss_variant))

    @property
    def psi1(self) -> float:
        return self.N / self.d

    @property
    def psi2(self) -> float:
        return self.n / self.d

    def as_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["loss_variant"] = self.loss_variant.value
        return out

    def config_hash(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def rng_stream(seed: int, trial: int, purpose: str) -> np.random.Generator:
    """Independent Philox stream for one (seed, trial, purpose) triple.

    Streams do not depend on the order in which trials are run.
    """
    tag = zlib.crc32(purpose.encode("utf-8"))
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(trial), tag))
    return np.random.Generator(np.random.Philox(ss))


def sigma(z):
    """Shifted ReLU, centred so that it has zero mean under N(0, 1)."""
    return np.maximum(z, 0.0) - _INV_SQRT_2PI


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    beta: np.ndarray
    tau2: float

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True, eq=False)
class FeatureMap:
    W: np.ndarray

    @property
    def N(self) -> int:
        return self.W.shape[0]

    @property
    def d(self) -> int:
        return self.W.shape[1]

    def __call__(self, x):
        return features(self, x)


@dataclass(frozen=True, eq=False)
class KernelJ:
    """Gram matrix of J, with J itself computed on first use."""

    gram: np.ndarray

    @cached_property
    def sqrt(self) -> np.ndarray:
        w, v = np.linalg.eigh(self.gram)
        root = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
        return 0.5 * (root + root.T)

    def norm(self, theta: np.ndarray) -> float:
        """||J theta||, using theta' J^2 theta so the square root is not needed."""
        return math.sqrt(max(float(theta @ (self.gram @ theta)), 0.0))


@dataclass(eq=False)
class TrainedModel:
    theta: np.ndarray
    feature_map: FeatureMap
    training_trace: np.ndarray
    config_hash: str
    converged: bool
    iterations: int
    grad_norm: float


def sample_sphere_rows(N: int, d: int, rng: np.random.Generator) -> FeatureMap:
    if N < 1 or d < 1:
        raise ValueError("N and d must be at least 1")
    W = rng.standard_normal((N, d))
    W /= np.linalg.norm(W, axis=1, keepdims=True)
    W.flags.writeable = False
    return FeatureMap(W)


def gen_dataset(d: int, n: int, tau2: float, rng: np.random.Generator) -> Dataset:
    if d < 1 or n < 1:
        raise ValueError("d and n must be at least 1")
    if tau2 < 0:
        raise ValueError("tau2 must be nonnegative")
    beta = rng.standard_normal(d)
    beta /= np.linalg.norm(beta)
    X = rng.standard_normal((n, d))
    y = X @ beta
    if tau2 > 0:
        y = y + math.sqrt(tau2) * rng.standard_normal(n)
    for arr in (X, y, beta):
        arr.flags.writeable = False
    return Dataset(X=X, y=y, beta=beta, tau2=float(tau2))


def features(fmap: FeatureMap, x: np.ndarray) -> np.ndarray:
    """sigma(W x) for a single input, or row-wise for a matrix of inputs."""
    x = np.asarray(x, dtype=float)
    return sigma(x @ fmap.W.T)


def noisy_linear_features(fmap: FeatureMap, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Gaussian-equivalent surrogate mu1 W x + mu2 u (mu0 is zero)."""
    x = np.asarray(x, dtype=float)
    return MU1 * (x @ fmap.W.T) + MU2 * np.asarray(u, dtype=float)


def compute_kernel_j(fmap: FeatureMap) -> KernelJ:
    G = fmap.W @ fmap.W.T
    G = 0.5 * (G + G.T)
    np.fill_diagonal(G, 1.0)  # rows are unit vectors
    np.clip(G, -1.0, 1.0, out=G)
    gram = G * (math.pi - np.arccos(G)) / (2.0 * math.pi)
    low = np.linalg.eigvalsh(gram)[0]
    if low < -1e-10:
        raise np.linalg.LinAlgError(f"kernel gram is not PSD (min eigenvalue {low:.3g})")
    return KernelJ(gram)


def worst_case_perturbations(theta, fmap: FeatureMap, X, y, eps: float):
    """Row-wise closed-form adversarial perturbation.

    Returns ``(Delta, attained, r, g)`` where row i of ``Delta`` moves the
    residual away from zero along ``g_i = W' diag(1(W x_i > 0)) theta``.
    """
    theta = np.asarray(theta, dtype=float)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    pre = X @ fmap.W.T
    r = y - sigma(pre) @ theta
    G = ((pre > 0) * theta) @ fmap.W
    gnorm = np.linalg.norm(G, axis=1)
    Delta = np.zeros_like(X)
    live = gnorm > 0
    if eps > 0 and np.any(live):
        # r = 0 is a tie; either direction attains the max
        s = np.where(r[live] < 0, -1.0, 1.0)
        Delta[live] = (-eps * s / gnorm[live])[:, None] * G[live]
    attained = np.abs(y - sigma((X + Delta) @ fmap.W.T) @ theta)
    # the linearised direction can lose to delta = 0 when the ReLU gating
    # flips inside the ball; the unperturbed point is always feasible
    worse = attained < np.abs(r)
    Delta[worse] = 0.0
    attained[worse] = np.abs(r[worse])
    return Delta, attained, r, G


def worst_case_perturbation(theta, fmap: FeatureMap, x, y: float, eps: float):
    """Closed-form maximizer of |y - theta' sigma(W(x + delta))| over the eps-ball."""
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    Delta, attained, _, _ = worst_case_perturbations(theta, fmap, np.atleast_2d(x), [y], eps)
    return Delta[0], float(attained[0])


class _Problem:
    """Precomputed quantities shared by every loss evaluation of one trial."""

    def __init__(self, dataset: Dataset, fmap: FeatureMap, eps: float,
                 variant: LossVariant, kernel: KernelJ | None = None):
        self.data = dataset
        self.fmap = fmap
        self.eps = float(eps)
        self.variant = LossVariant(variant)
        self.pre = dataset.X @ fmap.W.T
        self.phi = sigma(self.pre)
        self.mask = (self.pre > 0).astype(float)
        self.kernel = kernel
        if self.variant is LossVariant.EXACT_MINIMAX:
            self.wwt = fmap.W @ fmap.W.T
        if self.variant is LossVariant.L_DOUBLE_CIRCLE and kernel is None and self.eps > 0:
            self.kernel = compute_kernel_j(fmap)

    def __call__(self, theta, mu: float = 0.0):
        """Loss and subgradient; ``mu > 0`` evaluates the smoothed surrogate.

        Smoothing replaces |r| by sqrt(r^2 + mu^2) and each norm ||v|| by
        sqrt(||v||^2 + mu^2); for the exact adversary the sign of the
        residual becomes tanh(r / mu). Every variant returns to the exact
        loss as mu -> 0.
        """
        y, n, eps = self.data.y, self.data.n, self.eps
        r = y - self.phi @ theta
        v = self.variant
        if mu > 0:
            a = np.sqrt(r * r + mu * mu)
            sg = r / a
        else:
            a, sg = np.abs(r), np.sign(r)
        if eps == 0 or (mu == 0 and not np.any(theta)):
            grad = -(self.phi.T @ (a * sg)) / n
            return 0.5 * float(a @ a) / n, grad

        if v is LossVariant.EXACT_MINIMAX:
            base = self._adversarial_base(theta)
            if mu == 0:
                r_adv, dout = self._adversarial_branch(theta, np.where(r < 0, -1.0, 1.0), base)
                return 0.5 * float(r_adv @ r_adv) / n, -(dout.T @ r_adv) / n
            # Smooth choice between the two candidate directions +-eps g/||g||:
            # a log-sum-exp of the branch losses, which tends to their max.
            rp, dp = self._adversarial_branch(theta, 1.0, base)
            rm, dm = self._adversarial_branch(theta, -1.0, base)
            lp, lm = rp * rp, rm * rm
            top = np.maximum(lp, lm)
            ep, em = np.exp((lp - top) / mu), np.exp((lm - top) / mu)
            tot = ep + em
            val = top + mu * np.log(tot)
            grad = -((dp.T @ (ep / tot * rp)) + (dm.T @ (em / tot * rm))) / n
            return 0.5 * float(val.sum()) / n, grad

        if v is LossVariant.L_CIRCLE:
            W = self.fmap.W
            G = (self.mask * theta) @ W
            eta = np.sqrt(np.sum(G * G, axis=1) + mu * mu)
            c = a + eps * eta
            w = np.divide(c, eta, out=np.zeros_like(eta), where=eta > 0)
            grad = (-(self.phi.T @ (c * sg))
                    + eps * np.sum(self.mask * ((w[:, None] * G) @ W.T), axis=0)) / n
            return 0.5 * float(c @ c) / n, grad

        Kt = self.kernel.gram @ theta
        s = math.sqrt(max(float(theta @ Kt), 0.0) + mu * mu)
        c = a + eps * s
        grad = -(self.phi.T @ (c * sg)) / n
        if s > 0:
            grad += eps * (c.sum() / n) * (Kt / s)
        return 0.5 * float(c @ c) / n, grad


    def _adversarial_base(self, theta):
        G = (self.mask * theta) @ self.fmap.W
        gnorm = np.linalg.norm(G, axis=1)
        inv = np.divide(1.0, gnorm, out=np.zeros_like(gnorm), where=gnorm > 0)
        GWt = G @ self.fmap.W.T
        return G, inv, GWt

    def _adversarial_branch(self, theta, s, base):
        """Residual at x - eps s g/||g|| and its derivative in theta (rows).

        The derivative holds the Danskin term at the fixed perturbation plus
        the part coming from delta(theta). With h the input gradient at the
        perturbed point, that part is driven by h minus its component along
        g, which only involves the ReLU gates that flip inside the ball.
        """
        G, inv, GWt = base
        scale = -self.eps * s * inv
        pre_adv = self.pre + scale[:, None] * GWt
        phi_adv = sigma(pre_adv)
        r_adv = self.data.y - phi_adv @ theta
        flips = sparse.csr_matrix(((pre_adv > 0) - self.mask) * theta)
        if flips.nnz == 0:
            return r_adv, phi_adv
        dH_W = np.asarray(flips @ self.wwt)              # (H - G) W'
        dH_g = np.asarray(flips @ self.fmap.W) * G       # (H - G) . g, per row
        along = dH_g.sum(axis=1) * inv * inv
        PWt = dH_W - along[:, None] * GWt
        return r_adv, phi_adv + self.mask * (scale[:, None] * PWt)


def robust_loss_and_grad(theta, dataset: Dataset, fmap: FeatureMap, eps: float,
                         variant: LossVariant | str = LossVariant.EXACT_MINIMAX,
                         kernel: KernelJ | None = None):
    """Robust squared loss (1/2n) sum (|r_i| + eps eta_i)^2 and a subgradient.

    ``eta_i`` is ``||J theta||`` for ``l_double_circle`` and the per-sample
    gradient norm ``||W' diag(1(W x_i > 0)) theta||`` for ``l_circle``;
    ``exact_minimax`` plugs the closed-form perturbation into the network.
    """
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (fmap.N,) or dataset.d != fmap.d:
        raise ValueError("dimension mismatch between theta, dataset and feature map")
    return _Problem(dataset, fmap, eps, variant, kernel)(theta)


def lipschitz_estimate(dataset: Dataset, fmap: FeatureMap, eps: float) -> float:
    """Curvature scale of the loss: ||Phi||^2/n plus the adversarial part."""
    phi = features(fmap, dataset.X)
    s_phi = np.linalg.norm(phi, 2)
    s_w = np.linalg.norm(fmap.W, 2)
    # eta_i is at most ||W|| ||theta|| up to the ReLU mask
    return (s_phi + eps * s_w * math.sqrt(dataset.n)) ** 2 / dataset.n


def train_robust_erm(dataset: Dataset, fmap: FeatureMap, cfg: ExperimentConfig,
                     kernel: KernelJ | None = None,
                     theta0: np.ndarray | None = None) -> TrainedModel:
    """Minimise the robust loss from zero (or ``theta0``).

    The default ``lbfgs`` method runs smoothed L-BFGS stages; ``gd`` is
    full-batch gradient descent with Armijo backtracking.
    """
    opt = cfg.optimizer
    problem = _Problem(dataset, fmap, cfg.eps, cfg.loss_variant, kernel)
    theta = np.zeros(fmap.N) if theta0 is None else np.array(theta0, dtype=float)
    if opt.method == "lbfgs":
        return _train_lbfgs(problem, theta, cfg)
    base = opt.step_scale / lipschitz_estimate(dataset, fmap, cfg.eps)
    loss, grad = problem(theta)
    trace = [loss]
    gn = float(np.linalg.norm(grad))
    step = base
    it = 0
    while gn > opt.grad_tol and it < opt.max_iters:
        it += 1
        # each search starts near the last accepted step, never above the base
        step = min(base, 2.0 * step) if opt.backtracking else base
        while True:
            cand = theta - step * grad
            c_loss, c_grad = problem(cand)
            if not opt.backtracking:
                break
            if math.isfinite(c_loss) and c_loss <= loss - 1e-4 * step * gn * gn:
                break
            if step < base * 1e-12:
                break
            step *= 0.5
        if not math.isfinite(c_loss):
            raise TrainingDivergedError(
                f"loss became {c_loss} at iteration {it}", np.array(trace + [c_loss]))
        if opt.backtracking and not c_loss < loss:
            # the subgradient is not a descent direction: a kink at the optimum
            it -= 1
            break
        theta, loss, grad = cand, c_loss, c_grad
        trace.append(loss)
        gn = float(np.linalg.norm(grad))
    return TrainedModel(theta=theta, feature_map=fmap, training_trace=np.array(trace),
                        config_hash=cfg.config_hash(), converged=gn <= opt.grad_tol,
                        iterations=it, grad_norm=gn)


def _null_split(phi: np.ndarray):
    """Orthonormal basis of R^N with the row space of phi first, and its rank."""
    _, sv, vh = np.linalg.svd(phi, full_matrices=True)
    rank = int(np.sum(sv > sv[0] * 1e-10)) if sv.size and sv[0] > 0 else 0
    return vh.T, rank


def _train_lbfgs(problem: _Problem, theta: np.ndarray, cfg: ExperimentConfig) -> TrainedModel:
    opt, eps = cfg.optimizer, cfg.eps
    n_stages = max(1, int(round(math.log10(opt.mu_start / opt.mu_final))) + 1)
    mus = np.geomspace(opt.mu_start, opt.mu_final, n_stages)
    basis, rank = _null_split(problem.phi)
    N = theta.size
    trace = [problem(theta, mus[0])[0]]
    used = 0
    res = None
    for mu in mus:
        # Directions in the null space of the training features only see the
        # adversarial term, whose curvature there is about eps (mu + eps);
        # rescale them so both blocks look alike to the quasi-Newton model.
        scale = np.ones(N)
        if eps > 0 and rank < N:
            scale[rank:] = 1.0 / min(1.0, math.sqrt(eps * (mu + eps)))
        T = basis * scale
        xi = (basis.T @ theta) / scale
        for _ in range(5):
            budget = opt.max_iters - used
            if budget <= 0:
                break
            # normalise by the current value so the stopping rule is relative
            # even when the loss is of order eps^2
            f0 = max(problem(T @ xi, float(mu))[0], 1e-300)

            def fun(x, mu=float(mu), f0=f0, T=T):
                f, g = problem(T @ x, mu)
                return f / f0, (T.T @ g) / f0

            def make_record(f0):
                def record(intermediate_result):
                    trace.append(min(float(intermediate_result.fun) * f0, trace[-1]))
                return record

            res = optimize.minimize(fun, xi, jac=True, method="L-BFGS-B", callback=make_record(f0),
                                    options={"maxiter": budget, "maxcor": 30, "ftol": 1e-15,
                                             "gtol": opt.grad_tol})
            if not np.all(np.isfinite(res.x)) or not math.isfinite(res.fun):
                raise TrainingDivergedError("non-finite iterate", np.array(trace))
            used += int(res.nit)
            xi = res.x
            if res.nit < 5:
                break
        theta = T @ xi
    loss, grad = problem(theta, float(mus[-1]))
    gn = float(np.linalg.norm(grad))
    converged = res is not None and res.status == 0
    return TrainedModel(theta=theta, feature_map=problem.fmap, training_trace=np.array(trace),
                        config_hash=cfg.config_hash(), converged=bool(converged),
                        iterations=used, grad_norm=gn)


def run_trial(cfg: ExperimentConfig, trial: int):
    """Draw weights and data for one trial and train; returns (model, dataset)."""
    fmap = sample_sphere_rows(cfg.N, cfg.d, rng_stream(cfg.seed, trial, "weights"))
    data = gen_dataset(cfg.d, cfg.n, cfg.tau2, rng_stream(cfg.seed, trial, "data"))
    return train_robust_erm(data, fmap, cfg), data
