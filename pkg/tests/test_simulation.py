import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rfadv import simulation as sim
from rfadv.simulation import LossVariant

INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
VARIANTS = list(LossVariant)


def small_problem(seed=0, d=20, n=40, N=30, tau2=0.5):
    fmap = sim.sample_sphere_rows(N, d, sim.rng_stream(seed, 0, "weights"))
    data = sim.gen_dataset(d, n, tau2, sim.rng_stream(seed, 0, "data"))
    return fmap, data, sim.compute_kernel_j(fmap)


def unit_map(W):
    return sim.FeatureMap(np.asarray(W, dtype=float))


# -- configuration ------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        sim.ExperimentConfig(d=0, n=1, N=1, eps=0.1, tau2=0.5)
    with pytest.raises(ValueError):
        sim.ExperimentConfig(d=1, n=1, N=1, eps=-0.1, tau2=0.5)
    with pytest.raises(ValueError):
        sim.ExperimentConfig(d=1, n=1, N=1, eps=0.1, tau2=0.5, loss_variant="l_triangle")
    with pytest.raises(ValueError):
        sim.OptimizerConfig(method="adam")


def test_config_ratios_and_hash():
    a = sim.ExperimentConfig(d=100, n=300, N=450, eps=1.0, tau2=0.5)
    b = sim.ExperimentConfig(d=100, n=300, N=450, eps=1.0, tau2=0.5)
    c = sim.ExperimentConfig(d=100, n=300, N=450, eps=1.0, tau2=0.5, seed=1)
    assert (a.psi1, a.psi2) == (4.5, 3.0)
    assert a.config_hash() == b.config_hash() != c.config_hash()


def test_rng_streams_are_keyed():
    x = sim.rng_stream(3, 1, "data").standard_normal(5)
    assert np.array_equal(x, sim.rng_stream(3, 1, "data").standard_normal(5))
    assert not np.array_equal(x, sim.rng_stream(3, 2, "data").standard_normal(5))
    assert not np.array_equal(x, sim.rng_stream(3, 1, "weights").standard_normal(5))


# -- weights and data ---------------------------------------------------------

def test_sphere_rows_unit_norm():
    fmap = sim.sample_sphere_rows(200, 37, np.random.default_rng(1))
    np.testing.assert_allclose(np.linalg.norm(fmap.W, axis=1), 1.0, atol=1e-12)


def test_sphere_rows_near_orthogonal():
    fmap = sim.sample_sphere_rows(500, 500, sim.rng_stream(0, 0, "weights"))
    G = fmap.W @ fmap.W.T
    np.fill_diagonal(G, 0.0)
    assert np.max(np.abs(G)) <= math.log(500) / math.sqrt(500)


def test_sphere_rows_deterministic():
    a = sim.sample_sphere_rows(50, 10, sim.rng_stream(9, 4, "weights")).W
    b = sim.sample_sphere_rows(50, 10, sim.rng_stream(9, 4, "weights")).W
    assert np.array_equal(a, b)


def test_dataset_noiseless():
    data = sim.gen_dataset(10, 50, 0.0, np.random.default_rng(2))
    np.testing.assert_array_equal(data.y, data.X @ data.beta)
    assert np.linalg.norm(data.beta) == pytest.approx(1.0, abs=1e-12)


def test_dataset_moments():
    n, tau2 = 10_000, 0.5
    data = sim.gen_dataset(20, n, tau2, np.random.default_rng(3))
    y = data.y
    assert abs(y.mean()) < 4 * y.std() / math.sqrt(n)
    # var(y^2) = 2 (1 + tau2)^2 for a centred Gaussian
    se_var = math.sqrt(2.0) * (1 + tau2) / math.sqrt(n)
    assert abs(y.var() - (1 + tau2)) < 5 * se_var
    noise = y - data.X @ data.beta
    assert abs(noise.var() - tau2) < 5 * math.sqrt(2.0) * tau2 / math.sqrt(n)


def test_dataset_is_read_only():
    data = sim.gen_dataset(5, 5, 0.5, np.random.default_rng(0))
    with pytest.raises(ValueError):
        data.X[0, 0] = 1.0


# -- features ------------------------------------------------------------------

def test_features_at_zero():
    fmap = sim.sample_sphere_rows(7, 3, np.random.default_rng(0))
    np.testing.assert_allclose(sim.features(fmap, np.zeros(3)), -INV_SQRT_2PI)


def test_features_single_coordinate():
    fmap = unit_map([[1.0, 0.0, 0.0]])
    assert sim.features(fmap, np.array([2.0, 0.0, 0.0]))[0] == pytest.approx(1.60106, abs=1e-5)


def test_features_centred():
    rng = np.random.default_rng(4)
    fmap = sim.sample_sphere_rows(1, 10, rng)
    vals = sim.features(fmap, rng.standard_normal((100_000, 10)))[:, 0]
    assert abs(vals.mean()) < 4 * vals.std() / math.sqrt(vals.size)


def test_noisy_linear_at_zero():
    fmap = sim.sample_sphere_rows(4, 3, np.random.default_rng(0))
    np.testing.assert_array_equal(sim.noisy_linear_features(fmap, np.zeros(3), np.zeros(4)),
                                  np.zeros(4))


def test_noisy_linear_second_moments():
    rng = np.random.default_rng(5)
    fmap = sim.sample_sphere_rows(3, 4, rng)
    m = 100_000
    f = sim.noisy_linear_features(fmap, rng.standard_normal((m, 4)), rng.standard_normal((m, 3)))
    var = sim.MU1 ** 2 + sim.MU2 ** 2
    sq = f[:, 0] ** 2
    assert abs(sq.mean() - var) < 5 * sq.std() / math.sqrt(m)
    cross = f[:, 0] * f[:, 1]
    want = sim.MU1 ** 2 * fmap.W[0] @ fmap.W[1]
    assert abs(cross.mean() - want) < 5 * cross.std() / math.sqrt(m)


# -- J kernel ------------------------------------------------------------------

def test_kernel_single_row():
    k = sim.compute_kernel_j(unit_map([[0.6, 0.8]]))
    assert k.gram[0, 0] == 0.5
    assert k.sqrt[0, 0] == pytest.approx(1 / math.sqrt(2), abs=1e-15)


def test_kernel_orthogonal_rows():
    k = sim.compute_kernel_j(unit_map([[1.0, 0.0], [0.0, 1.0]]))
    assert k.gram[0, 1] == 0.0
    np.testing.assert_array_equal(np.diag(k.gram), 0.5)


def test_kernel_psd_and_sqrt():
    fmap = sim.sample_sphere_rows(120, 30, np.random.default_rng(6))
    k = sim.compute_kernel_j(fmap)
    np.testing.assert_array_equal(k.gram, k.gram.T)
    np.testing.assert_array_equal(np.diag(k.gram), 0.5)
    assert np.min(np.linalg.eigvalsh(k.gram)) >= -1e-10
    assert np.max(np.abs(k.sqrt @ k.sqrt - k.gram)) < 1e-8
    assert np.min(np.linalg.eigvalsh(k.sqrt)) >= -1e-12
    theta = np.random.default_rng(0).standard_normal(120)
    assert k.norm(theta) == pytest.approx(np.linalg.norm(k.sqrt @ theta), rel=1e-10)


def test_kernel_matches_expected_gradient_norm():
    # theta' J^2 theta = E || W' diag(1(Wx > 0)) theta ||^2
    rng = np.random.default_rng(7)
    fmap = sim.sample_sphere_rows(15, 6, rng)
    k = sim.compute_kernel_j(fmap)
    theta = rng.standard_normal(15)
    X = rng.standard_normal((200_000, 6))
    g = ((X @ fmap.W.T > 0) * theta) @ fmap.W
    vals = np.sum(g * g, axis=1)
    assert abs(vals.mean() - k.norm(theta) ** 2) < 5 * vals.std() / math.sqrt(vals.size)


@pytest.mark.parametrize("d", [200, 400])
def test_kernel_spectral_approximation(d):
    # (WW' + I)/4 plus the rank-one second-order term 11'/(2 pi d)
    N = int(1.5 * d)
    fmap = sim.sample_sphere_rows(N, d, sim.rng_stream(1, 0, "weights"))
    gram = sim.compute_kernel_j(fmap).gram
    approx = (fmap.W @ fmap.W.T + np.eye(N)) / 4 + 1 / (2 * math.pi * d)
    gap = np.max(np.abs(np.linalg.eigvalsh(gram - approx)))
    assert gap < 0.6 / math.sqrt(d)
    # without it the distance stays at psi1 / (2 pi)
    plain = np.max(np.abs(np.linalg.eigvalsh(gram - approx + 1 / (2 * math.pi * d))))
    assert plain == pytest.approx(1.5 / (2 * math.pi), abs=0.01)


# -- closed-form adversary -----------------------------------------------------

def test_perturbation_zero_theta():
    fmap = sim.sample_sphere_rows(5, 3, np.random.default_rng(0))
    delta, att = sim.worst_case_perturbation(np.zeros(5), fmap, np.ones(3), -0.7, 0.5)
    np.testing.assert_array_equal(delta, 0.0)
    assert att == pytest.approx(0.7)


def test_perturbation_one_dimensional():
    fmap = unit_map([[1.0]])
    delta, att = sim.worst_case_perturbation(np.array([1.0]), fmap, np.array([2.0]), 0.0, 0.5)
    assert delta[0] == pytest.approx(0.5)
    assert att == pytest.approx(2.10106, abs=1e-5)
    grid = np.linspace(-0.5, 0.5, 100_001)
    vals = np.abs(0.0 - (np.maximum(2.0 + grid, 0.0) - INV_SQRT_2PI))
    assert grid[np.argmax(vals)] == pytest.approx(delta[0], abs=1e-5)
    assert att == pytest.approx(vals.max(), abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 3.0))
def test_adversary_never_helps(seed, eps):
    rng = np.random.default_rng(seed)
    fmap = sim.sample_sphere_rows(25, 8, rng)
    X = rng.standard_normal((30, 8))
    y = rng.standard_normal(30)
    theta = rng.standard_normal(25) / 5
    Delta, att, r, _ = sim.worst_case_perturbations(theta, fmap, X, y, eps)
    assert np.all(att >= np.abs(r) - 1e-12)
    assert np.all(np.linalg.norm(Delta, axis=1) <= eps * (1 + 1e-12))


def test_perturbation_zero_budget():
    fmap, data, _ = small_problem()
    theta = np.random.default_rng(0).standard_normal(fmap.N)
    Delta, att, r, _ = sim.worst_case_perturbations(theta, fmap, data.X, data.y, 0.0)
    np.testing.assert_array_equal(Delta, 0.0)
    np.testing.assert_allclose(att, np.abs(r))


# -- robust loss ---------------------------------------------------------------

@pytest.mark.parametrize("variant", VARIANTS)
def test_loss_at_zero_theta(variant):
    fmap, data, kernel = small_problem()
    loss, _ = sim.robust_loss_and_grad(np.zeros(fmap.N), data, fmap, 0.7, variant, kernel)
    assert loss == pytest.approx(np.sum(data.y ** 2) / (2 * data.n), rel=1e-14)


@pytest.mark.parametrize("variant", VARIANTS)
def test_loss_without_adversary_is_least_squares(variant):
    fmap, data, kernel = small_problem()
    theta = np.random.default_rng(1).standard_normal(fmap.N) / 3
    phi = sim.features(fmap, data.X)
    r = data.y - phi @ theta
    loss, grad = sim.robust_loss_and_grad(theta, data, fmap, 0.0, variant, kernel)
    assert loss == pytest.approx(r @ r / (2 * data.n), rel=1e-13)
    np.testing.assert_allclose(grad, -phi.T @ r / data.n, rtol=1e-11, atol=1e-14)


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("seed", [0, 1])
def test_gradient_matches_central_differences(variant, seed):
    fmap, data, kernel = small_problem(seed)
    theta = np.random.default_rng(seed + 10).standard_normal(fmap.N) / 3
    f = lambda t: sim.robust_loss_and_grad(t, data, fmap, 0.4, variant, kernel)[0]
    _, grad = sim.robust_loss_and_grad(theta, data, fmap, 0.4, variant, kernel)
    h = 1e-6
    fd = np.array([(f(theta + h * e) - f(theta - h * e)) / (2 * h) for e in np.eye(fmap.N)])
    np.testing.assert_allclose(grad, fd, rtol=1e-4, atol=1e-4 * np.max(np.abs(fd)))


@pytest.mark.parametrize("variant", VARIANTS)
def test_loss_nonnegative_and_grows_with_eps(variant):
    fmap, data, kernel = small_problem()
    theta = np.random.default_rng(2).standard_normal(fmap.N) / 3
    losses = [sim.robust_loss_and_grad(theta, data, fmap, e, variant, kernel)[0]
              for e in (0.0, 0.1, 0.5, 1.0)]
    assert losses[0] >= 0
    assert np.all(np.diff(losses) >= 0)


def test_circle_loss_close_to_exact_at_moderate_d():
    rng = np.random.default_rng(3)
    d, n, N = 400, 200, 600
    fmap = sim.sample_sphere_rows(N, d, rng)
    data = sim.gen_dataset(d, n, 0.5, rng)
    theta = rng.standard_normal(N) * math.sqrt(math.log(d) / d) / 2
    exact = sim.robust_loss_and_grad(theta, data, fmap, 0.5, "exact_minimax")[0]
    circ = sim.robust_loss_and_grad(theta, data, fmap, 0.5, "l_circle")[0]
    assert abs(circ - exact) <= math.log(d) * d ** (-1 / 6) * (1 + exact) * 0.1


def test_eta_concentrates_on_j_norm():
    rng = np.random.default_rng(4)
    d, N = 400, 600
    fmap = sim.sample_sphere_rows(N, d, rng)
    kernel = sim.compute_kernel_j(fmap)
    theta = rng.standard_normal(N) / math.sqrt(N)
    X = rng.standard_normal((300, d))
    g = ((X @ fmap.W.T > 0) * theta) @ fmap.W
    eta2 = np.sum(g * g, axis=1)
    rel = np.abs(eta2 - kernel.norm(theta) ** 2) / kernel.norm(theta) ** 2
    assert np.mean(rel > 0.25) < 0.05


# -- training ------------------------------------------------------------------

@pytest.mark.parametrize("method", ["gd", "lbfgs"])
def test_training_recovers_least_squares(method):
    fmap, data, kernel = small_problem(N=15)
    opt = sim.OptimizerConfig(method=method, grad_tol=1e-9, max_iters=50_000)
    cfg = sim.ExperimentConfig(d=20, n=40, N=15, eps=0.0, tau2=0.5, optimizer=opt,
                               loss_variant="l_circle")
    model = sim.train_robust_erm(data, fmap, cfg, kernel)
    phi = sim.features(fmap, data.X)
    ls = np.linalg.lstsq(phi, data.y, rcond=None)[0]
    np.testing.assert_allclose(model.theta, ls, rtol=1e-5, atol=1e-7)
    grad = -phi.T @ (data.y - phi @ model.theta) / data.n
    assert np.linalg.norm(grad) < 1e-6
    assert np.all(np.diff(model.training_trace) <= 1e-15)


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("method", ["gd", "lbfgs"])
def test_training_trace_nonincreasing(variant, method):
    fmap, data, kernel = small_problem()
    opt = sim.OptimizerConfig(method=method, max_iters=3000)
    cfg = sim.ExperimentConfig(d=20, n=40, N=30, eps=0.3, tau2=0.5, optimizer=opt,
                               loss_variant=variant)
    model = sim.train_robust_erm(data, fmap, cfg, kernel)
    trace = model.training_trace
    if method == "gd":
        # the smoothed path starts from a surrogate value instead
        assert trace[0] == pytest.approx(np.sum(data.y ** 2) / (2 * data.n), rel=1e-12)
    assert np.all(np.diff(trace) <= 0)
    final = sim.robust_loss_and_grad(model.theta, data, fmap, 0.3, variant, kernel)[0]
    assert final < trace[0]


def test_lbfgs_beats_gd_at_kinks():
    # the nonsmooth minimiser stalls plain GD; the smoothed path gets lower
    fmap, data, kernel = small_problem(N=60)
    losses = {}
    for method in ("gd", "lbfgs"):
        cfg = sim.ExperimentConfig(d=20, n=40, N=60, eps=0.5, tau2=0.5,
                                   optimizer=sim.OptimizerConfig(method=method),
                                   loss_variant="l_double_circle")
        theta = sim.train_robust_erm(data, fmap, cfg, kernel).theta
        losses[method] = sim.robust_loss_and_grad(theta, data, fmap, 0.5, "l_double_circle",
                                                  kernel)[0]
    assert losses["lbfgs"] <= losses["gd"] + 1e-12


def test_overparameterised_small_eps_picks_min_j_interpolator():
    # as eps -> 0 the robust minimiser is the interpolator with smallest ||J theta||
    fmap, data, kernel = small_problem(N=80)
    cfg = sim.ExperimentConfig(d=20, n=40, N=80, eps=1e-7, tau2=0.5,
                               loss_variant="l_double_circle")
    theta = sim.train_robust_erm(data, fmap, cfg, kernel).theta
    phi = sim.features(fmap, data.X)
    # closed form: minimise theta' K theta subject to phi theta = y
    Kinv_phiT = np.linalg.solve(kernel.gram, phi.T)
    lam = np.linalg.solve(phi @ Kinv_phiT, data.y)
    best = Kinv_phiT @ lam
    assert np.max(np.abs(phi @ theta - data.y)) < 1e-5
    assert kernel.norm(theta) == pytest.approx(kernel.norm(best), rel=1e-4)


def test_divergence_raises_with_trace():
    fmap, data, kernel = small_problem()
    opt = sim.OptimizerConfig(method="gd", step_scale=1e6, backtracking=False, max_iters=500)
    cfg = sim.ExperimentConfig(d=20, n=40, N=30, eps=0.0, tau2=0.5, optimizer=opt,
                               loss_variant="l_circle")
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(sim.TrainingDivergedError) as info:
            sim.train_robust_erm(data, fmap, cfg, kernel)
    assert info.value.trace.size >= 2


def test_run_trial_deterministic():
    cfg = sim.ExperimentConfig(d=10, n=30, N=20, eps=0.2, tau2=0.5, seed=5,
                               loss_variant="l_circle")
    a, da = sim.run_trial(cfg, 3)
    b, db = sim.run_trial(cfg, 3)
    assert np.array_equal(a.theta, b.theta)
    assert np.array_equal(da.X, db.X)
    assert a.config_hash == cfg.config_hash()
