"""Command-line front end: theory curves, simulations and their comparison.

Every command writes a CSV (12 significant digits, LF line endings) and the
simulation-backed commands also write a JSON manifest next to it holding
the configuration, seed and per-task status needed to regenerate each row.

Exit codes: 0 success, 1 usage or configuration error, 2 partial failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from . import evaluation as ev
from . import simulation as sim
from . import theory as th

__all__ = [
    "ConfigError",
    "ComparisonRow",
    "CompareConfig",
    "SweepConfig",
    "THEORY_FIELDS",
    "main",
    "parse_grid",
    "compare_config_from_dict",
    "sweep_config_from_dict",
    "load_compare_config",
    "load_sweep_config",
    "aggregate",
    "run_sweep_points",
    "run_theory",
    "run_simulation",
    "run_compare",
    "run_sweep",
    "worker_count",
]

EXIT_OK, EXIT_USAGE, EXIT_PARTIAL = 0, 1, 2

THEORY_FIELDS = (
    "psi1", "psi2", "eps", "tau2", "adversarial_risk", "standard_risk",
    "alpha", "tau_g", "beta", "gamma", "tau_q", "lambda_star", "nu_star",
    "grad_norm", "start_spread", "status",
)
TRIAL_FIELDS = (
    "trial", "status", "adversarial_risk", "standard_risk", "standard_error",
    "m_theta", "j_norm_theta", "iterations", "grad_norm", "converged",
    "constraint_violated",
)


class ConfigError(ValueError):
    """Bad flags or configuration file; maps to exit code 1."""


@dataclass(frozen=True)
class ComparisonRow:
    psi1: float
    psi2: float
    eps: float
    tau2: float
    d: int
    n: int
    N: int
    ar_theory: float
    ar_empirical_mean: float
    ar_empirical_se: float
    std_risk_theory: float
    std_risk_empirical: float
    trials: int
    method: str

    def within_tolerance(self, rel: float = 0.05, n_se: float = 2.0) -> bool:
        if not (math.isfinite(self.ar_theory) and math.isfinite(self.ar_empirical_mean)):
            return False
        gap = abs(self.ar_theory - self.ar_empirical_mean)
        return gap <= max(rel * self.ar_theory, n_se * self.ar_empirical_se)


# ---------------------------------------------------------------------------
# Formatting and I/O
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "" if math.isnan(value) else f"{float(value):.12g}"
    return str(value)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(row.get(h)) for h in header])
    return buf.getvalue()


def _write(path: str, text: str) -> None:
    if path == "-":
        sys.stdout.write(text)
        return
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _manifest_path(out: str) -> str | None:
    if out == "-":
        return None
    root, ext = os.path.splitext(out)
    return (root if ext.lower() == ".csv" else out) + ".manifest.json"


def _write_manifest(out: str, payload: dict) -> None:
    path = _manifest_path(out)
    if path is None:
        return
    payload = {"version": __version__, **payload}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if hasattr(obj, "value"):
        return obj.value
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def worker_count() -> int:
    raw = os.environ.get("RFADV_THREADS", "").strip()
    if not raw:
        return 1
    try:
        count = int(raw)
    except ValueError:
        raise ConfigError(f"RFADV_THREADS must be an integer, got {raw!r}") from None
    if count < 1:
        raise ConfigError("RFADV_THREADS must be at least 1")
    return count


def _map(fn, tasks, workers: int):
    """Ordered map over independent tasks, in-process when one worker."""
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
        return list(pool.map(fn, tasks))


def parse_grid(spec: str) -> np.ndarray:
    """``a:b:k`` means k evenly spaced values from a to b inclusive."""
    parts = spec.split(":")
    if len(parts) != 3:
        raise ConfigError(f"grid must look like a:b:k, got {spec!r}")
    try:
        a, b, k = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise ConfigError(f"grid must look like a:b:k, got {spec!r}") from None
    if k < 1:
        raise ConfigError("grid needs at least one point")
    return np.linspace(a, b, k)


# ---------------------------------------------------------------------------
# Theory
# ---------------------------------------------------------------------------

def _theory_row(pt: th.TheoryPoint, pred: th.RiskPrediction | None, error: str = "") -> dict:
    row = {"psi1": pt.psi1, "psi2": pt.psi2, "eps": pt.eps, "tau2": pt.tau2}
    if pred is None:
        row["status"] = "failed: " + error.replace("\n", " ")
        return row
    s = pred.saddle
    row.update(adversarial_risk=pred.adversarial_risk, standard_risk=pred.standard_component,
               alpha=s.alpha, tau_g=s.tau_g, beta=s.beta, gamma=s.gamma, tau_q=s.tau_q,
               lambda_star=s.lambda_star, nu_star=s.nu_star, grad_norm=s.grad_norm,
               start_spread=s.start_spread, status="ok")
    return row


def _solve_point(pt: th.TheoryPoint) -> dict:
    try:
        return _theory_row(pt, th.predict_adversarial_risk(pt))
    except (th.SolverError, ArithmeticError, ValueError) as exc:
        return _theory_row(pt, None, str(exc))


def run_theory(points, workers: int = 1) -> list[dict]:
    """Independent (cold-started) solves; safe to run in parallel."""
    points = list(points)
    if not points:
        raise ConfigError("empty grid")
    return _map(_solve_point, points, workers)


def run_sweep_points(points) -> list[dict]:
    """Warm-started sweep along the given order."""
    rows = th.sweep_theory(points, warm_start=True)
    return [_theory_row(r.point, r.prediction, r.error) for r in rows]


def _status(rows) -> int:
    return EXIT_OK if all(r.get("status") == "ok" for r in rows) else EXIT_PARTIAL


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

METHOD_BY_NAME = {
    "analytic": ev.RiskMethod.ANALYTIC_GE,
    "analytic_ge": ev.RiskMethod.ANALYTIC_GE,
    "closed_form": ev.RiskMethod.MC_CLOSED_FORM,
    "mc_closed_form": ev.RiskMethod.MC_CLOSED_FORM,
    "pgd": ev.RiskMethod.MC_PGD,
    "mc_pgd": ev.RiskMethod.MC_PGD,
}


def _method(name) -> ev.RiskMethod:
    try:
        return METHOD_BY_NAME[str(name)]
    except KeyError:
        raise ConfigError(f"unknown evaluation method {name!r}; "
                          f"choose from {sorted(METHOD_BY_NAME)}") from None


def _evaluate(model: sim.TrainedModel, data: sim.Dataset, cfg: sim.ExperimentConfig,
              method: ev.RiskMethod, trial: int, n_test: int,
              kernel: sim.KernelJ | None) -> ev.RiskReport:
    fmap = model.feature_map
    if method is ev.RiskMethod.ANALYTIC_GE:
        return ev.analytic_adversarial_risk(model.theta, fmap, kernel, data.beta,
                                            cfg.tau2, cfg.eps)
    oracle = ev.MCOracle.CLOSED_FORM if method is ev.RiskMethod.MC_CLOSED_FORM else ev.MCOracle.PGD
    rng = sim.rng_stream(cfg.seed, trial, "test")
    return ev.mc_adversarial_risk(model.theta, fmap, data.beta, cfg.tau2, cfg.eps,
                                  n_test=n_test, rng=rng, oracle=oracle, kernel=kernel)


def _trial_task(task) -> dict:
    cfg, trial, methods, n_test = task
    t0 = time.perf_counter()
    out = {"trial": trial, "reports": {}}
    try:
        fmap = sim.sample_sphere_rows(cfg.N, cfg.d, sim.rng_stream(cfg.seed, trial, "weights"))
        data = sim.gen_dataset(cfg.d, cfg.n, cfg.tau2, sim.rng_stream(cfg.seed, trial, "data"))
        kernel = sim.compute_kernel_j(fmap)
        model = sim.train_robust_erm(data, fmap, cfg, kernel=kernel)
    except sim.TrainingDivergedError as exc:
        out.update(status="diverged", error=str(exc), seconds=time.perf_counter() - t0)
        return out
    out.update(status="ok", iterations=model.iterations, grad_norm=model.grad_norm,
               converged=model.converged)
    for m in methods:
        rep = _evaluate(model, data, cfg, m, trial, n_test, kernel)
        out["reports"][m.value] = rep
    out["seconds"] = time.perf_counter() - t0
    return out


def run_simulation(cfg: sim.ExperimentConfig, methods=(ev.RiskMethod.MC_CLOSED_FORM,),
                   n_test: int = ev.DEFAULT_N_TEST, workers: int = 1) -> list[dict]:
    """Train and evaluate every trial; results are sorted by trial index."""
    methods = tuple(ev.RiskMethod(m) for m in methods)
    tasks = [(cfg, t, methods, n_test) for t in range(cfg.trials)]
    return sorted(_map(_trial_task, tasks, workers), key=lambda r: r["trial"])


def aggregate(results, method: ev.RiskMethod) -> tuple[float, float, float, int]:
    """(mean adversarial risk, its standard error, mean standard risk, successes)."""
    reps = [r["reports"][method.value] for r in results if r["status"] == "ok"]
    if not reps:
        return math.nan, math.nan, math.nan, 0
    ar = np.array([r.adversarial_risk for r in reps])
    sr = np.array([r.standard_risk for r in reps])
    se = float(ar.std(ddof=1) / math.sqrt(len(ar))) if len(ar) > 1 else 0.0
    return float(ar.mean()), se, float(sr.mean()), len(reps)


def _trial_rows(results, method: ev.RiskMethod) -> list[dict]:
    rows = []
    for r in results:
        row = {"trial": r["trial"], "status": r["status"]}
        if r["status"] == "ok":
            rep = r["reports"][method.value]
            row.update(adversarial_risk=rep.adversarial_risk, standard_risk=rep.standard_risk,
                       standard_error=rep.standard_error, m_theta=rep.m_theta,
                       j_norm_theta=rep.j_norm_theta, iterations=r["iterations"],
                       grad_norm=r["grad_norm"], converged=r["converged"],
                       constraint_violated=rep.constraint_violated)
        rows.append(row)
    mean, se, sr, ok = aggregate(results, method)
    rows.append({"trial": "mean", "status": f"{ok}/{len(results)} ok",
                 "adversarial_risk": mean, "standard_risk": sr, "standard_error": se})
    return rows


def _trial_status(results) -> list[dict]:
    keep = ("trial", "status", "iterations", "grad_norm", "converged", "seconds", "error")
    return [{k: r[k] for k in keep if k in r} for r in results]


# ---------------------------------------------------------------------------
# Configuration files
# ---------------------------------------------------------------------------

_COMPARE_KEYS = {
    "model": {"d", "n", "N", "N_over_n", "tau2", "trials", "seed"},
    "adversary": {"eps", "loss_variant", "methods", "n_test"},
    "optimizer": {"step_scale", "max_iters", "grad_tol", "backtracking", "method",
                  "mu_start", "mu_final"},
}
_SWEEP_KEYS = {
    "model": {"psi1", "psi2", "N_over_n", "tau2"},
    "adversary": {"eps"},
    "sweep": {"axis", "values", "start", "stop", "num", "families"},
}


def _read_toml(path: str) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _check_keys(doc: dict, allowed: dict, required=()) -> None:
    for section, body in doc.items():
        if section not in allowed:
            raise ConfigError(f"unknown section [{section}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{section}] must be a table")
        for key in body:
            if key not in allowed[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
    for section in required:
        if section not in doc:
            raise ConfigError(f"missing section [{section}]")


def _as_list(value, name) -> list:
    vals = list(value) if isinstance(value, (list, tuple)) else [value]
    if not vals:
        raise ConfigError(f"{name} is empty")
    return vals


def _positive_int(value, name) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ConfigError(f"{name} must be a positive integer")
    return value


def _number(value, name, low=0.0) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{name} must be a number")
    if not (math.isfinite(value) and value >= low):
        raise ConfigError(f"{name} must be finite and at least {low}")
    return float(value)


@dataclass(frozen=True)
class CompareConfig:
    d: int
    n: int
    N_values: tuple
    eps_values: tuple
    tau2: float
    trials: int
    seed: int
    loss_variant: sim.LossVariant
    methods: tuple
    n_test: int
    optimizer: sim.OptimizerConfig

    def experiments(self):
        for eps in self.eps_values:
            for N in self.N_values:
                yield sim.ExperimentConfig(d=self.d, n=self.n, N=N, eps=eps, tau2=self.tau2,
                                           trials=self.trials, seed=self.seed,
                                           optimizer=self.optimizer,
                                           loss_variant=self.loss_variant)

    def as_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["optimizer"] = {f.name: getattr(self.optimizer, f.name)
                            for f in fields(self.optimizer)}
        out["loss_variant"] = self.loss_variant.value
        out["methods"] = [m.value for m in self.methods]
        out["N_values"] = list(self.N_values)
        out["eps_values"] = list(self.eps_values)
        return out


def compare_config_from_dict(doc: dict) -> CompareConfig:
    _check_keys(doc, _COMPARE_KEYS, required=("model", "adversary"))
    model, adv, opt = doc["model"], doc["adversary"], doc.get("optimizer", {})
    for key in ("d", "n", "tau2"):
        if key not in model:
            raise ConfigError(f"[model] needs {key!r}")
    d = _positive_int(model["d"], "d")
    n = _positive_int(model["n"], "n")
    if ("N" in model) == ("N_over_n" in model):
        raise ConfigError("[model] needs exactly one of 'N' and 'N_over_n'")
    if "N" in model:
        N_values = tuple(_positive_int(v, "N") for v in _as_list(model["N"], "N"))
    else:
        ratios = [_number(v, "N_over_n") for v in _as_list(model["N_over_n"], "N_over_n")]
        N_values = tuple(max(1, int(round(r * n))) for r in ratios)
    if "eps" not in adv:
        raise ConfigError("[adversary] needs 'eps'")
    eps_values = tuple(_number(v, "eps") for v in _as_list(adv["eps"], "eps"))
    seed = model.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError("seed must be an integer in [0, 2^64)")
    try:
        variant = sim.LossVariant(adv.get("loss_variant", sim.LossVariant.EXACT_MINIMAX.value))
        optimizer = sim.OptimizerConfig(**opt)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    methods = tuple(dict.fromkeys(_method(m) for m in _as_list(
        adv.get("methods", ["analytic_ge"]), "methods")))
    return CompareConfig(
        d=d, n=n, N_values=N_values, eps_values=eps_values,
        tau2=_number(model["tau2"], "tau2"),
        trials=_positive_int(model.get("trials", 20), "trials"), seed=seed,
        loss_variant=variant, methods=methods,
        n_test=_positive_int(adv.get("n_test", ev.DEFAULT_N_TEST), "n_test"),
        optimizer=optimizer,
    )


def load_compare_config(path: str) -> CompareConfig:
    return compare_config_from_dict(_read_toml(path))


@dataclass(frozen=True)
class SweepConfig:
    axis: str
    points: tuple  # tuple of tuples of TheoryPoint, one per family

    def as_dict(self) -> dict:
        return {"axis": self.axis,
                "points": [[(p.psi1, p.psi2, p.eps, p.tau2) for p in fam]
                           for fam in self.points]}


_AXES = ("psi-ratio", "eps", "tau2")


def sweep_config_from_dict(doc: dict) -> SweepConfig:
    _check_keys(doc, _SWEEP_KEYS, required=("sweep",))
    model, adv, sw = doc.get("model", {}), doc.get("adversary", {}), doc["sweep"]
    axis = sw.get("axis")
    if axis not in _AXES:
        raise ConfigError(f"[sweep] axis must be one of {_AXES}")
    if "values" in sw:
        if any(k in sw for k in ("start", "stop", "num")):
            raise ConfigError("[sweep] give either 'values' or start/stop/num")
        values = [_number(v, "values", low=-math.inf) for v in _as_list(sw["values"], "values")]
    elif all(k in sw for k in ("start", "stop", "num")):
        values = list(np.linspace(_number(sw["start"], "start", -math.inf),
                                  _number(sw["stop"], "stop", -math.inf),
                                  _positive_int(sw["num"], "num")))
    else:
        raise ConfigError("[sweep] needs 'values' or start/stop/num")
    if not values:
        raise ConfigError("empty grid")

    if "psi2" not in model:
        raise ConfigError("[model] needs 'psi2'")
    psi2_values = [_number(v, "psi2") for v in _as_list(model["psi2"], "psi2")]
    families = sw.get("families", "psi2")
    if families != "psi2":
        raise ConfigError("[sweep] families can only be 'psi2'")

    def fixed(section, key):
        if key not in section:
            raise ConfigError(f"sweep over {axis} needs fixed {key!r}")
        return _number(section[key], key)

    fams = []
    try:
        for psi2 in psi2_values:
            if axis == "psi-ratio":
                eps, tau2 = fixed(adv, "eps"), fixed(model, "tau2")
                pts = [th.TheoryPoint(v * psi2, psi2, eps, tau2) for v in values]
            else:
                if "psi1" in model:
                    psi1 = fixed(model, "psi1")
                else:
                    psi1 = fixed(model, "N_over_n") * psi2
                if axis == "eps":
                    tau2 = fixed(model, "tau2")
                    pts = [th.TheoryPoint(psi1, psi2, v, tau2) for v in values]
                else:
                    eps = fixed(adv, "eps")
                    pts = [th.TheoryPoint(psi1, psi2, eps, v) for v in values]
            fams.append(tuple(pts))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return SweepConfig(axis=axis, points=tuple(fams))


def load_sweep_config(path: str) -> SweepConfig:
    return sweep_config_from_dict(_read_toml(path))


# ---------------------------------------------------------------------------
# Compare and sweep drivers
# ---------------------------------------------------------------------------

def _compare_task(task):
    cfg, methods, n_test = task
    pt = th.TheoryPoint(cfg.psi1, cfg.psi2, cfg.eps, cfg.tau2)
    t0 = time.perf_counter()
    theory_row = _solve_point(pt)
    t1 = time.perf_counter()
    results = run_simulation(cfg, methods, n_test, workers=1)
    t2 = time.perf_counter()
    return cfg, theory_row, results, (t1 - t0, t2 - t1)


def run_compare(config: CompareConfig, workers: int = 1):
    """Returns (comparison rows, manifest entries) for every grid point."""
    tasks = [(cfg, config.methods, config.n_test) for cfg in config.experiments()]
    rows, entries = [], []
    for cfg, trow, results, (t_theory, t_sim) in _map(_compare_task, tasks, workers):
        ok = trow["status"] == "ok"
        for m in config.methods:
            mean, se, sr, count = aggregate(results, m)
            rows.append(ComparisonRow(
                psi1=cfg.psi1, psi2=cfg.psi2, eps=cfg.eps, tau2=cfg.tau2,
                d=cfg.d, n=cfg.n, N=cfg.N,
                ar_theory=trow["adversarial_risk"] if ok else math.nan,
                ar_empirical_mean=mean, ar_empirical_se=se,
                std_risk_theory=trow["standard_risk"] if ok else math.nan,
                std_risk_empirical=sr, trials=count, method=m.value))
        entries.append({"N": cfg.N, "eps": cfg.eps, "config_hash": cfg.config_hash(),
                        "theory_status": trow["status"],
                        "seconds": {"theory": t_theory, "simulation": t_sim},
                        "trials": _trial_status(results)})
    rows.sort(key=lambda r: (r.eps, r.N, r.method))
    return rows, entries


def run_sweep(config: SweepConfig, workers: int = 1) -> list[dict]:
    fams = list(config.points)
    groups = _map(run_sweep_points, fams, workers)
    return [row for group in groups for row in group]


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rfadv", description="Adversarial risk of random-features regression.")
    p.add_argument("--version", action="version", version=f"rfadv {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("theory", help="limit adversarial risk on a psi1 grid")
    g = t.add_mutually_exclusive_group(required=True)
    g.add_argument("--psi1", type=float, help="single N/d value")
    g.add_argument("--psi1-grid", help="a:b:k, k evenly spaced N/d values")
    t.add_argument("--psi2", type=float, required=True, help="n/d")
    t.add_argument("--eps", type=float, required=True)
    t.add_argument("--tau2", type=float, required=True)
    t.add_argument("--out", default="-", help="CSV path, '-' for stdout")

    s = sub.add_parser("simulate", help="train and evaluate finite-size models")
    s.add_argument("--d", type=int, required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--N", type=int, required=True)
    s.add_argument("--eps", type=float, required=True)
    s.add_argument("--tau2", type=float, required=True)
    s.add_argument("--trials", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--loss-variant", default=sim.LossVariant.EXACT_MINIMAX.value,
                   choices=[v.value for v in sim.LossVariant])
    s.add_argument("--oracle", default="closed_form",
                   choices=["analytic", "closed_form", "pgd"],
                   help="risk evaluation: Gaussian-equivalent formula or Monte Carlo")
    s.add_argument("--n-test", type=int, default=ev.DEFAULT_N_TEST)
    s.add_argument("--max-iters", type=int, default=sim.OptimizerConfig.max_iters)
    s.add_argument("--grad-tol", type=float, default=sim.OptimizerConfig.grad_tol)
    s.add_argument("--step-scale", type=float, default=sim.OptimizerConfig.step_scale)
    s.add_argument("--no-backtracking", action="store_true")
    s.add_argument("--optimizer", default=sim.OptimizerConfig.method, choices=["lbfgs", "gd"],
                   help="smoothed L-BFGS stages or plain gradient descent")
    s.add_argument("--out", default="-")

    c = sub.add_parser("compare", help="theory against simulation from a TOML config")
    c.add_argument("config")
    c.add_argument("--out", default="-")
    c.add_argument("--dry-run", action="store_true", help="validate and print the plan")

    w = sub.add_parser("sweep", help="warm-started theory sweep from a TOML config")
    w.add_argument("config")
    w.add_argument("--out", default="-")
    w.add_argument("--dry-run", action="store_true", help="validate and print the plan")
    return p


def _theory_points(args) -> list[th.TheoryPoint]:
    psi1 = [args.psi1] if args.psi1 is not None else list(parse_grid(args.psi1_grid))
    try:
        return [th.TheoryPoint(float(v), args.psi2, args.eps, args.tau2) for v in psi1]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_theory(args) -> int:
    rows = run_theory(_theory_points(args), worker_count())
    _write(args.out, _csv_text(THEORY_FIELDS, rows))
    return _status(rows)


def cmd_simulate(args) -> int:
    try:
        opt = sim.OptimizerConfig(step_scale=args.step_scale, max_iters=args.max_iters,
                                  grad_tol=args.grad_tol, backtracking=not args.no_backtracking,
                                  method=args.optimizer)
        cfg = sim.ExperimentConfig(d=args.d, n=args.n, N=args.N, eps=args.eps, tau2=args.tau2,
                                   trials=args.trials, seed=args.seed, optimizer=opt,
                                   loss_variant=args.loss_variant)
        if args.n_test < 1:
            raise ValueError("n_test must be at least 1")
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    method = _method(args.oracle)
    t0 = time.perf_counter()
    results = run_simulation(cfg, (method,), args.n_test, worker_count())
    elapsed = time.perf_counter() - t0
    _write(args.out, _csv_text(TRIAL_FIELDS, _trial_rows(results, method)))
    _write_manifest(args.out, {
        "command": "simulate", "config": cfg.as_dict(), "config_hash": cfg.config_hash(),
        "seed": cfg.seed, "method": method.value, "n_test": args.n_test,
        "seconds": {"total": elapsed}, "trials": _trial_status(results)})
    return EXIT_OK if all(r["status"] == "ok" for r in results) else EXIT_PARTIAL


def cmd_compare(args) -> int:
    config = load_compare_config(args.config)
    if args.dry_run:
        print(f"compare: d={config.d} n={config.n} tau2={config.tau2} "
              f"trials={config.trials} seed={config.seed} "
              f"variant={config.loss_variant.value} "
              f"methods={','.join(m.value for m in config.methods)}")
        for cfg in config.experiments():
            print(f"  eps={cfg.eps:.6g} N={cfg.N} psi1={cfg.psi1:.6g} psi2={cfg.psi2:.6g}")
        return EXIT_OK
    t0 = time.perf_counter()
    rows, entries = run_compare(config, worker_count())
    elapsed = time.perf_counter() - t0
    header = [f.name for f in fields(ComparisonRow)]
    _write(args.out, _csv_text(header, [r.__dict__ for r in rows]))
    _write_manifest(args.out, {"command": "compare", "config": config.as_dict(),
                               "seed": config.seed, "seconds": {"total": elapsed},
                               "points": entries})
    bad = any(e["theory_status"] != "ok" or any(t["status"] != "ok" for t in e["trials"])
              for e in entries)
    return EXIT_PARTIAL if bad else EXIT_OK


def cmd_sweep(args) -> int:
    config = load_sweep_config(args.config)
    if args.dry_run:
        print(f"sweep over {config.axis}: {sum(len(f) for f in config.points)} points")
        for fam in config.points:
            for p in fam:
                print(f"  psi1={p.psi1:.6g} psi2={p.psi2:.6g} eps={p.eps:.6g} tau2={p.tau2:.6g}")
        return EXIT_OK
    rows = run_sweep(config, worker_count())
    _write(args.out, _csv_text(THEORY_FIELDS, rows))
    return _status(rows)


_COMMANDS = {"theory": cmd_theory, "simulate": cmd_simulate,
             "compare": cmd_compare, "sweep": cmd_sweep}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"rfadv: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
