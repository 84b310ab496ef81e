"""Experiment drivers shared by the command line and the acceptance tests.

Each driver returns plain rows (lists of dicts) so the caller decides how to
serialize them. CSV output uses 17 significant digits, which round-trips
doubles exactly.
"""

from __future__ import annotations

import csv
import json
import math
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.optimize

from . import __version__
from .core import DynamicsParams, Form, RawParams, SamplerState, normalize_params, rng_derive
from .errors import ConfigError, ParameterDomainError
from .estimators import (
    _run_replicas,
    epdf,
    normality_summary,
    rejection_init,
    replica_ensemble,
    rescaled_residuals,
    variance_estimate,
)
from .galerkin import (
    assemble_pieces,
    galerkin_variance,
    langevin_limit_variance,
    observable_coefficients,
    spectral_gap,
    GalerkinOperator,
)
from .integrators import StepConfig, make_stepper, simulate
from .observables import Observable, parse_observable
from .potentials import (
    BlrPosterior,
    Dataset,
    MinibatchGradient,
    average_test_likelihood,
    load_dataset,
    make_synthetic_logistic,
    pca_whiten,
)

# ---- grids and serialization ----------------------------------------------


def parse_grid(text) -> np.ndarray:
    """``log:a:b:n``, ``lin:a:b:n``, a comma list, or a single number."""
    if isinstance(text, (int, float)):
        return np.array([float(text)])
    if isinstance(text, (list, tuple, np.ndarray)):
        return np.asarray(text, dtype=np.float64)
    s = str(text).strip()
    try:
        if s.startswith(("log:", "lin:")):
            kind, a, b, n = s.split(":")
            a, b, n = float(a), float(b), int(n)
            if n < 1:
                raise ValueError("grid needs at least one point")
            if kind == "log":
                if a <= 0 or b <= 0:
                    raise ValueError("log grid bounds must be positive")
                return np.logspace(math.log10(a), math.log10(b), n)
            return np.linspace(a, b, n)
        return np.array([float(v) for v in s.split(",") if v.strip()])
    except ValueError as exc:
        raise ConfigError(f"bad grid {text!r}: {exc}") from None


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    return str(v)


def write_csv(path, rows: Sequence[dict], columns: Optional[Sequence[str]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])
    return path


def read_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_sidecar(path, config: dict, seed, wall_time: float, extra: Optional[dict] = None) -> Path:
    meta = {"config": config, "seed": seed, "version": __version__, "wall_time_s": wall_time}
    if extra:
        meta.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(meta, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    return str(o)


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


# ---- spectral gap and Galerkin variance ------------------------------------


def spectral_gap_sweep(L: int, beta: float, mode: str, grid, gamma=1.0, epsilon=1.0) -> list:
    """Spectral gaps along one parameter line.

    mode ``epsilon`` sweeps epsilon at fixed gamma, ``gamma`` sweeps gamma at
    fixed epsilon, ``alpha`` sets gamma = epsilon = alpha.
    """
    if L < 2:
        raise ConfigError("Galerkin basis needs L >= 2")
    grid = parse_grid(grid)
    if np.any(grid <= 0):
        raise ConfigError("sweep values must be positive")
    pieces = assemble_pieces(L, beta)
    rows = []
    for x in grid:
        if mode == "epsilon":
            g, e = gamma, x
        elif mode == "gamma":
            g, e = x, epsilon
        elif mode == "alpha":
            g, e = x, x
        else:
            raise ConfigError(f"unknown spectral-gap mode {mode!r}")
        op = _operator(L, beta, g, e, pieces)
        rows.append({"gamma": g, "epsilon": e, "L": L, "beta": beta, "spectral_gap": spectral_gap(op)})
    return rows


def _operator(L, beta, gamma, epsilon, pieces):
    A_OU, A_NH, A_H = pieces
    A = gamma * A_OU + A_NH / epsilon + A_H
    return GalerkinOperator(L, float(beta), float(gamma), float(epsilon), A_OU, A_NH, A_H, A)


def galerkin_variance_table(L: int, beta: float, gamma: float, epsilons, observables) -> list:
    """Asymptotic variances on an epsilon grid plus their large-epsilon limits."""
    epsilons = parse_grid(epsilons)
    pieces = assemble_pieces(L, beta)
    rows = []
    for name in observables:
        obs = parse_observable(name)
        if obs.exponents is None:
            raise ConfigError(f"observable {name!r} is not a polynomial")
        coeffs = observable_coefficients(name, L, beta)
        try:
            limit = langevin_limit_variance(L, beta, gamma, name) if obs.exponents[2] == 0 else float("nan")
        except ConfigError:
            limit = float("nan")
        for e in epsilons:
            op = _operator(L, beta, gamma, e, pieces)
            rows.append(
                {
                    "observable": obs.name,
                    "gamma": gamma,
                    "epsilon": e,
                    "L": L,
                    "beta": beta,
                    "sigma2": galerkin_variance(op, coeffs),
                    "sigma2_inf": limit,
                }
            )
    return rows


# ---- replica ensembles ------------------------------------------------------


def variance_sweep(
    model,
    beta: float,
    mode: str,
    grid,
    dt: float,
    K: int,
    N: int,
    observables,
    seed: int,
    gamma: float = 1.0,
    epsilon: float = 1.0,
    threads: int = 1,
) -> list:
    """Monte Carlo asymptotic variances along an epsilon or gamma line."""
    grid = parse_grid(grid)
    rows = []
    for x in grid:
        if mode == "epsilon":
            g, e = gamma, x
        elif mode == "gamma":
            g, e = x, epsilon
        else:
            raise ConfigError(f"unknown sweep mode {mode!r}")
        params = DynamicsParams(beta, g, e, n=model.n)
        res = replica_ensemble(model, params, N, StepConfig(dt, K), observables, seed, threads=threads)
        for name in res.observables:
            est = variance_estimate(res, name)
            rows.append(
                {
                    "observable": name,
                    "gamma": g,
                    "epsilon": e,
                    "dt": dt,
                    "K": K,
                    "N": est.N,
                    "mean": est.empirical_mean,
                    "mean_se": est.mean_se,
                    "var_of_means": est.var_of_means,
                    "asymptotic_variance": est.asymptotic_variance,
                    "asymptotic_variance_se": est.asymptotic_variance_se,
                    "excluded": res.excluded,
                }
            )
    return rows


def _normal_pdf(x, var=1.0):
    return np.exp(-0.5 * x * x / var) / math.sqrt(2 * math.pi * var)


def clt_experiment(
    model,
    params: DynamicsParams,
    dt: float,
    K: int,
    N: int,
    observables,
    seed: int,
    checkpoints=(),
    bins: int = 50,
    threads: int = 1,
):
    """Rescaled residuals at several horizons, with EPDFs and normality summaries.

    The reference mean and variance come from the same ensemble at ``K``.
    Returns ``(summary_rows, epdf_rows, residuals)`` where ``residuals`` maps
    ``(observable, K_j)`` to the residual vector.
    """
    cps = sorted({int(c) for c in checkpoints if 1 <= int(c) < K} | {K})
    res = replica_ensemble(model, params, N, StepConfig(dt, K), observables, seed, checkpoints=cps, threads=threads)
    summary, dens_rows, residuals = [], [], {}
    for name in res.observables:
        ref = variance_estimate(res, name)
        for kj in cps:
            r = rescaled_residuals(res, name, ref.empirical_mean, ref.asymptotic_variance, K=kj)
            residuals[(name, kj)] = r
            s = normality_summary(r)
            summary.append(
                {
                    "observable": name,
                    "K": kj,
                    "T": kj * dt,
                    "N": r.size,
                    "ref_mean": ref.empirical_mean,
                    "sigma2": ref.asymptotic_variance,
                    "ks": s["ks"],
                    "skew": s["skew"],
                    "kurtosis": s["kurtosis"],
                    "residual_var": s["var"],
                }
            )
            centers, dens = epdf(r, bins=bins, range=(-5.0, 5.0))
            fitted = _normal_pdf(centers, max(s["var"], 1e-300))
            for c, d, f0, f1 in zip(centers, dens, _normal_pdf(centers), fitted):
                dens_rows.append(
                    {"observable": name, "K": kj, "T": kj * dt, "bin_center": c, "density": d,
                     "normal_density": f0, "fitted_density": f1}
                )
    return summary, dens_rows, residuals


def sample_trajectory(model, params, integrator, dt, K, thinning, observables, seed, q0=None):
    """One trajectory from equilibrium (or from ``q0``) recorded every ``thinning`` steps."""
    stepper = make_stepper(integrator, params, model)
    rng = rng_derive(seed, 0)
    if q0 is None:
        state = rejection_init(model, params, rng.child(2))
    else:
        q = np.broadcast_to(np.asarray(q0, dtype=np.float64), (model.n,)).copy()
        p = rng.child(2).gaussian(model.n) / math.sqrt(params.beta)
        state = SamplerState(q, p, 0.0, Form.NORMALIZED)
    if stepper.form is Form.RAW and state.form is not Form.RAW:
        from .core import friction_convert

        state = friction_convert(state, params, Form.RAW)
    series = simulate(state, stepper, StepConfig(dt, K, thinning), observables, rng)
    rows = []
    for j, t in enumerate(series.times):
        row = {"step": j * series.thinning, "time": t}
        row.update({n: series.values[j, i] for i, n in enumerate(series.names)})
        rows.append(row)
    return rows


# ---- Bayesian logistic regression -------------------------------------------

DEFAULT_Q_STAR = (1.0, -0.5, 0.75, -1.25, 0.25)


def synthetic_blr_data(size=2000, test_size=500, q_star=DEFAULT_Q_STAR, seed=0):
    """Train/test pair drawn from a logistic model with known weights."""
    root = rng_derive(seed, 2**32)
    train = make_synthetic_logistic(size, q_star, root.child(1), "train")
    test = make_synthetic_logistic(test_size, q_star, root.child(2), "test")
    return train, test


def load_blr_data(train_path, test_path, pca: Optional[int] = None, header=False):
    if not train_path or not test_path:
        raise ConfigError("blr needs both a train and a test dataset path")
    for p in (train_path, test_path):
        if not Path(p).is_file():
            raise ConfigError(f"dataset file not found: {p}")
    train = load_dataset(train_path, header=header, split="train")
    test = load_dataset(test_path, header=header, split="test")
    if pca:
        train, test = pca_whiten(train, test, int(pca))
    return train, test


def map_estimate(model: BlrPosterior) -> np.ndarray:
    """Posterior mode, used as the common starting point of all replicas."""
    res = scipy.optimize.minimize(
        lambda q: float(model.energy(q)),
        np.zeros(model.n),
        jac=lambda q: model.gradient(q),
        method="L-BFGS-B",
    )
    return np.asarray(res.x)


def blr_params(nu: float, sigma_A: float = 0.0, beta: float = 1.0, n: int = 1) -> DynamicsParams:
    """Raw parameters for ODABADO with minibatch gradients.

    The gradient-noise amplitude is unknown by construction and ODABADO never
    reads it; a nominal sigma_G = 1 only fills the normalized record.
    """
    if not nu > 0:
        raise ParameterDomainError("nu must be positive")
    if sigma_A > 0:
        return normalize_params(beta, nu, sigma_A, 0.0, n=n)
    return DynamicsParams(beta, beta / 2.0, math.sqrt(nu), n=n, raw=RawParams(float(nu), 0.0, 1.0))


def _blr_observables(test: Dataset, coords):
    obs = []
    for i in coords:
        obs.append(parse_observable(f"q[{i}]"))
        obs.append(parse_observable(f"q[{i}]^2"))
    obs.append(Observable("test_likelihood", lambda q, p, f: average_test_likelihood(test, q)))
    return obs


def blr_reference(model: BlrPosterior, test: Dataset, q0, dt, K, N, seed, coords=None, threads=1) -> dict:
    """Full-gradient BADODAB reference: posterior means and standard deviations."""
    coords = list(range(model.n)) if coords is None else list(coords)
    params = DynamicsParams(1.0, 1.0, 1.0, n=model.n)
    obs = _blr_observables(test, coords)
    res = replica_ensemble(model, params, N, StepConfig(dt, K), obs, seed, init="fixed", q0=q0, threads=threads)
    avg = res.per_replica_averages.mean(axis=0)
    out = {"coords": coords, "mean": {}, "std": {}, "mean_se": {}}
    for j, i in enumerate(coords):
        m1, m2 = avg[2 * j], avg[2 * j + 1]
        out["mean"][i] = float(m1)
        out["std"][i] = float(math.sqrt(max(m2 - m1 * m1, 0.0)))
        out["mean_se"][i] = float(res.per_replica_averages[:, 2 * j].std() / math.sqrt(res.N))
    out["test_likelihood"] = float(avg[-1])
    return out


def half_gap_time(times, values, ref) -> float:
    """First time at which ``|value - ref|`` falls to half its initial size."""
    values = np.asarray(values, dtype=np.float64)
    gap = abs(values[0] - ref)
    hit = np.nonzero(np.abs(values - ref) <= 0.5 * gap)[0]
    return float(times[hit[0]]) if hit.size else float("inf")


def blr_run(
    model: BlrPosterior,
    test: Dataset,
    nus,
    dt: float,
    K: int,
    m: int,
    N: int,
    seed: int,
    coords=(0,),
    q0=None,
    sigma_A: float = 0.0,
    records: int = 200,
    threads: int = 1,
) -> list:
    """Cumulative averages over time of ODABADO runs with minibatch gradients.

    All replicas start at ``q0`` (the posterior mode by default) with
    friction 0 and Gaussian momenta. Values are averaged over the N replicas.
    """
    if q0 is None:
        q0 = map_estimate(model)
    coords = list(coords)
    obs = _blr_observables(test, coords)
    grid = np.unique(np.geomspace(1, K, min(records, K)).astype(int))
    grad = MinibatchGradient(model, m)
    rows = []
    for nu in parse_grid(nus):
        params = blr_params(nu, sigma_A, n=model.n)
        res = _run_replicas(
            model, params, N, StepConfig(dt, K), obs, seed,
            integrator="odabado", gradient=grad, init="fixed", q0=q0, checkpoints=grid, threads=threads,
        )
        for kj in grid:
            avg = res.checkpoint_averages[kj].mean(axis=0)
            row = {"nu": nu, "K": int(kj), "T": kj * dt}
            for j, i in enumerate(coords):
                m1, m2 = avg[2 * j], avg[2 * j + 1]
                row[f"mean_q{i}"] = m1
                row[f"var_q{i}"] = m2 - m1 * m1
            row["test_likelihood"] = avg[-1]
            rows.append(row)
    return rows


def blr_convergence_times(
    model: BlrPosterior,
    test: Dataset,
    nus,
    ref: dict,
    dt: float,
    K: int,
    m: int,
    N: int,
    seed: int,
    coord: int = 0,
    q0=None,
    sigma_A: float = 0.0,
    records: int = 300,
    threads: int = 1,
) -> list:
    """Median half-gap times of single-trajectory cumulative averages, per nu.

    Each of the N replicas is treated as its own single run: its running
    average of ``q[coord]`` and of the test likelihood is compared with the
    reference values in ``ref`` (as returned by :func:`blr_reference`).
    """
    if q0 is None:
        q0 = map_estimate(model)
    obs = _blr_observables(test, [coord])
    grid = np.unique(np.geomspace(1, K, min(records, K)).astype(int))
    times = grid * dt
    targets = {"mean": (0, ref["mean"][coord]), "test_likelihood": (2, ref["test_likelihood"])}
    grad = MinibatchGradient(model, m)
    rows = []
    for nu in parse_grid(nus):
        res = replica_ensemble(
            model, blr_params(nu, sigma_A, n=model.n), N, StepConfig(dt, K), obs, seed,
            integrator="odabado", gradient=grad, init="fixed", q0=q0, checkpoints=grid, threads=threads,
        )
        cum = np.stack([res.checkpoint_averages[k] for k in grid])
        row = {"nu": nu}
        for key, (j, value) in targets.items():
            h = [half_gap_time(times, cum[:, r, j], value) for r in range(cum.shape[1])]
            row[f"half_gap_{key}"] = float(np.median(h))
        rows.append(row)
    return rows


# ---- named profiles ----------------------------------------------------------

PROFILES = {
    "fig2a": {"command": "spectral-gap", "mode": "epsilon", "L": 10, "beta": 1.0, "gamma": 1.0,
              "grid": "log:1e-4:1e2:31"},
    "fig2b": {"command": "spectral-gap", "mode": "gamma", "L": 10, "beta": 1.0, "epsilon": 1.0,
              "grid": "log:1e-4:1e2:31"},
    "fig2c": {"command": "spectral-gap", "mode": "alpha", "L": 10, "beta": 1.0, "grid": "log:1e-3:1e2:31"},
    "fig3": {"command": "variance-sweep", "mode": "both", "potential": "double_well", "a": 1.0, "b": 1.0,
             "c": 0.5, "beta": 1.0, "epsilon_grid": "log:1e-2:10:13", "gamma_grid": "log:1e-4:1e2:13",
             "dt": 2e-3, "steps": 100_000, "replicas": 10_000},
    "fig4": {"command": "clt", "potential": "double_well", "a": 1.0, "b": 1.0, "c": 0.5, "beta": 1.0,
             "gamma": 1.0, "epsilon": 1.0, "dt": 0.1, "steps": 1000, "replicas": 500_000,
             "checkpoints": "10,100,1000"},
    "appendixB": {"command": "variance-sweep", "mode": "gamma", "potential": "double_well", "a": 1.0,
                  "b": 4.0, "c": 0.5, "beta": 1.0, "epsilon": 1.0, "gamma_grid": "log:1e-4:1e2:13",
                  "dt": 0.1, "steps": 100_000, "replicas": 10_000},
    "blr": {"command": "blr", "nu": "1,10,100", "dt": 1e-2, "steps": 10_000, "replicas": 1, "minibatch": 100,
            "sigma_a": 0.0, "pca": 100},
}

# desk-scale variants keep the protocol and shrink N and K
DESK = {
    "fig3-desk": ("fig3", {"steps": 20_000, "replicas": 2000}),
    "fig4-desk": ("fig4", {"replicas": 100_000}),
    "appendixB-desk": ("appendixB", {"steps": 20_000, "replicas": 2000}),
    "blr-desk": ("blr", {"synthetic": True, "pca": 0, "steps": 20_000, "replicas": 8}),
}
for _name, (_base, _over) in DESK.items():
    PROFILES[_name] = {**PROFILES[_base], **_over}
