"""Replica-ensemble Monte Carlo estimators.

An ensemble runs N independent replicas (replica ``i`` owns the random stream
with id ``i``) and records, per replica, the trajectory average
``(1/K) sum_{k<K} phi(x_k)`` of each observable. From those averages we get
the spread across replicas, its time-rescaled asymptotic variance, and CLT
residuals.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .core import DynamicsParams, Form, RngStream, SamplerState, friction_convert, rng_derive
from .errors import ConfigError, DataError, EnvelopeError, NumericalError, ParameterDomainError
from .integrators import BADODAB, ODABADO, Propagator, StepConfig
from .observables import parse_observables
from .potentials import DoubleWell, Harmonic, PotentialModel

log = logging.getLogger(__name__)

MAX_EXCLUDED_FRACTION = 0.01


@dataclass(frozen=True)
class Envelope:
    """Gaussian rejection envelope for a one-dimensional Gibbs density."""

    scale: float
    bound: float  # M: accept x with prob f(x) / (M g(x))
    shift: float  # energy offset so f peaks at 1
    beta: float
    energy: object = field(repr=False)

    def log_target(self, x):
        return -self.beta * (self.energy(x) - self.shift)

    def log_proposal(self, x):
        return -0.5 * (x / self.scale) ** 2 - math.log(self.scale * math.sqrt(2 * math.pi))


def _coordinate_energy(model: PotentialModel):
    if isinstance(model, Harmonic):
        return lambda x: 0.5 * x * x
    if isinstance(model, DoubleWell):
        a, b, c = model.a, model.b, model.c
        return lambda x: (b / a) * (x * x - a) ** 2 + c * x
    raise ConfigError("rejection initialization supports separable harmonic or double-well models")


def build_envelope(model: PotentialModel, beta: float, scale=None, radius=None, grid=4096) -> Envelope:
    energy = _coordinate_energy(model)
    # locate the mass of the target on a wide grid first
    wide = np.linspace(-50.0, 50.0, 200_001)
    e = energy(wide)
    w = np.exp(-beta * (e - e.min()))
    w /= w.sum()
    mean = float(w @ wide)
    sd = math.sqrt(float(w @ (wide - mean) ** 2))
    if scale is None:
        scale = 1.5 * math.sqrt(sd * sd + mean * mean)
    if radius is None:
        radius = abs(mean) + 10.0 * sd
    xs = np.linspace(-radius, radius, grid)
    shift = float(energy(xs).min())
    env = Envelope(float(scale), 1.0, shift, float(beta), energy)
    ratio = np.exp(env.log_target(xs) - env.log_proposal(xs))
    return Envelope(float(scale), 1.2 * float(ratio.max()), shift, float(beta), energy)


def _rejection_draw(env: Envelope, rng: RngStream, count: int, max_tries=None) -> np.ndarray:
    out = np.empty(count)
    filled = 0
    tried = 0
    batch = max(8, 2 * count)
    while filled < count:
        x = env.scale * rng.gaussian(batch)
        u = rng.uniform(batch)
        acc = np.log(u) < env.log_target(x) - env.log_proposal(x) - math.log(env.bound)
        take = x[acc][: count - filled]
        out[filled : filled + take.size] = take
        filled += take.size
        tried += batch
        if tried >= 10_000 and filled / tried < 1e-4:
            raise EnvelopeError(
                f"rejection acceptance rate {filled / tried:.2e} < 1e-4; adjust envelope scale or radius"
            )
    return out


def _equilibrium_draw(env: Envelope, rng: RngStream, n: int, beta: float):
    q = _rejection_draw(env, rng, n)
    sd = 1.0 / math.sqrt(beta)
    p = sd * rng.gaussian(n)
    xi = sd * float(rng.gaussian(1)[0])
    return q, p, xi


def rejection_init(model: PotentialModel, params: DynamicsParams, rng: RngStream, envelope=None) -> SamplerState:
    """Draw one exact equilibrium state in normalized form.

    Momenta and xi are Gaussian with variance ``1/beta``; each position
    coordinate comes from rejection sampling of ``exp(-beta U)``.
    """
    env = envelope or build_envelope(model, params.beta)
    q, p, xi = _equilibrium_draw(env, rng, model.n, params.beta)
    return SamplerState(q, p, xi, Form.NORMALIZED)


@dataclass(frozen=True)
class ReplicaEnsembleResult:
    per_replica_averages: np.ndarray  # (N_kept, n_obs)
    observables: list
    replica_ids: np.ndarray
    K: int
    dt: float
    params: DynamicsParams
    seed: int
    excluded: int = 0
    checkpoint_averages: dict = field(default_factory=dict)  # K_j -> (N_kept, n_obs)
    config: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.per_replica_averages.shape[0]

    def column(self, observable, K=None) -> np.ndarray:
        j = self.observables.index(observable)
        if K is None or K == self.K:
            return self.per_replica_averages[:, j]
        if K not in self.checkpoint_averages:
            raise ConfigError(f"no checkpoint at K={K}")
        return self.checkpoint_averages[K][:, j]


@dataclass(frozen=True)
class VarianceEstimate:
    empirical_mean: float
    var_of_means: float
    asymptotic_variance: float
    N: int
    K: int
    dt: float
    asymptotic_variance_se: float = float("nan")
    mean_se: float = float("nan")


def trajectory_average(series, observable) -> float:
    """Average of an observable over recorded steps ``0..K-1`` (final row excluded)."""
    if series.thinning != 1:
        raise ConfigError("trajectory averages need every step recorded (thinning = 1)")
    col = series.column(observable) if not isinstance(observable, int) else series.values[:, observable]
    if col.shape[0] < 2:
        raise DataError("series must contain at least one completed step")
    return float(np.mean(col[:-1], axis=0))


def _initial_batch(model, params, streams, init, q0, form):
    N = len(streams)
    n = model.n
    sd = 1.0 / math.sqrt(params.beta)
    if init == "equilibrium":
        env = build_envelope(model, params.beta)
        draws = [_equilibrium_draw(env, s, n, params.beta) for s in streams]
        q = np.stack([d[0] for d in draws])
        p = np.stack([d[1] for d in draws])
        f = np.array([d[2] for d in draws])
    elif init == "fixed":
        if q0 is None:
            raise ConfigError("fixed initialization needs q0")
        q = np.tile(np.asarray(q0, dtype=np.float64).reshape(1, n), (N, 1))
        p = np.stack([sd * s.gaussian(n) for s in streams])
        # friction starts at 0 in the integrator's own variable (zeta for raw form)
        return SamplerState(q, p, np.zeros(N), form)
    else:
        raise ConfigError(f"unknown initialization {init!r}")
    state = SamplerState(q, p, f, Form.NORMALIZED)
    if form is Form.RAW:
        state = friction_convert(state, params, Form.RAW)
    return state


def _run_chunk(model, params, stepper, ids, seed, step_config, obs, checkpoints, init, q0):
    streams = [rng_derive(seed, int(i)) for i in ids]
    state = _initial_batch(model, params, streams, init, q0, stepper.form)
    prop = Propagator(stepper, state, streams, step_config.dt)
    K = step_config.K
    sums = np.zeros((len(ids), len(obs)))
    snaps = {}
    for k in range(K):
        for j, o in enumerate(obs):
            sums[:, j] += o(prop.q, prop.p, prop.f)
        if (k + 1) in checkpoints:
            snaps[k + 1] = sums / (k + 1)
        if k + 1 < K:
            prop.advance()
    return sums / max(K, 1), snaps, prop.excluded.copy()


def replica_ensemble(
    model: PotentialModel,
    params: DynamicsParams,
    N: int,
    step_config: StepConfig,
    observables: Sequence,
    seed: int,
    integrator: str = "badodab",
    gradient=None,
    init: str = "equilibrium",
    q0=None,
    checkpoints: Sequence[int] = (),
    stream_ids: Optional[Sequence[int]] = None,
    threads: int = 1,
    chunk_size: int = 25_000,
) -> ReplicaEnsembleResult:
    """Run ``N`` independent replicas and return their trajectory averages.

    Only the first ``K - 1`` steps are integrated, because the average covers
    states ``0..K-1``. Diverging replicas are dropped; more than 1% dropped
    raises.
    """
    if N < 2:
        raise ParameterDomainError("an ensemble needs N >= 2 replicas")
    return _run_replicas(model, params, N, step_config, observables, seed, integrator, gradient, init, q0,
                         checkpoints, stream_ids, threads, chunk_size)


def _run_replicas(model, params, N, step_config, observables, seed, integrator="badodab", gradient=None,
                  init="equilibrium", q0=None, checkpoints=(), stream_ids=None, threads=1, chunk_size=25_000):
    # no N >= 2 check: single-trajectory time series (BLR runs) go through here too
    if N < 1:
        raise ParameterDomainError("need at least one replica")
    if step_config.K < 1:
        raise ParameterDomainError("trajectory averages need K >= 1")
    obs = parse_observables(observables)
    ids = np.arange(N, dtype=np.int64) if stream_ids is None else np.asarray(stream_ids, dtype=np.int64)
    if ids.shape != (N,):
        raise ConfigError("stream_ids must have one entry per replica")
    checkpoints = sorted({int(c) for c in checkpoints if 1 <= int(c) <= step_config.K})

    if integrator.lower() == "badodab":
        stepper = BADODAB(params, model)
    elif integrator.lower() == "odabado":
        stepper = ODABADO(params, gradient if gradient is not None else model)
    else:
        raise ConfigError(f"unknown integrator {integrator!r}")

    chunks = [ids[i : i + chunk_size] for i in range(0, N, chunk_size)]
    job = lambda c: _run_chunk(model, params, stepper, c, seed, step_config, obs, set(checkpoints), init, q0)
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(job, chunks))
    else:
        parts = [job(c) for c in chunks]

    avgs = np.concatenate([p[0] for p in parts])
    excluded = np.concatenate([p[2] for p in parts])
    snaps = {c: np.concatenate([p[1][c] for p in parts])[~excluded] for c in checkpoints}
    n_ex = int(excluded.sum())
    if n_ex:
        log.warning("excluded %d of %d replicas after divergence", n_ex, N)
    if n_ex > MAX_EXCLUDED_FRACTION * N:
        raise NumericalError(f"{n_ex} of {N} replicas diverged (more than 1%)")
    return ReplicaEnsembleResult(
        per_replica_averages=avgs[~excluded],
        observables=[o.name for o in obs],
        replica_ids=ids[~excluded],
        K=step_config.K,
        dt=step_config.dt,
        params=params,
        seed=int(seed),
        excluded=n_ex,
        checkpoint_averages=snaps,
        config={"integrator": integrator, "init": init, "N": N, "model": model.describe()},
    )


def variance_estimate(result: ReplicaEnsembleResult, observable, K=None) -> VarianceEstimate:
    """Spread of the replica averages, with the literal 1/N normalization.

    ``asymptotic_variance`` rescales it by the physical time ``K * dt``.
    """
    K = result.K if K is None else K
    x = result.column(observable, K)
    N = x.size
    if N < 2:
        raise ParameterDomainError("variance estimate needs N >= 2")
    mean = float(x.mean())
    dev = x - mean
    var = float(np.mean(dev * dev))
    m4 = float(np.mean(dev**4))
    var_se = math.sqrt(max(m4 - var * var, 0.0) / N)
    T = K * result.dt
    return VarianceEstimate(
        empirical_mean=mean,
        var_of_means=var,
        asymptotic_variance=T * var,
        N=N,
        K=K,
        dt=result.dt,
        asymptotic_variance_se=T * var_se,
        mean_se=math.sqrt(var / N),
    )


def rescaled_residuals(result: ReplicaEnsembleResult, observable, ref_mean: float, sigma2_as: float, K=None):
    """Per-replica residuals ``sqrt(K dt / sigma2) (avg - ref_mean)``."""
    if not sigma2_as > 0:
        raise ParameterDomainError("sigma2_as must be positive")
    K = result.K if K is None else K
    x = result.column(observable, K)
    return math.sqrt(K * result.dt / sigma2_as) * (x - ref_mean)


def epdf(samples, bins: int = 50, range=None):
    """Histogram density: returns bin centers and densities integrating to one."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size == 0:
        raise DataError("no samples")
    if bins < 2:
        raise ParameterDomainError("need at least 2 bins")
    dens, edges = np.histogram(x, bins=bins, range=range, density=True)
    return 0.5 * (edges[1:] + edges[:-1]), dens


def normality_summary(samples) -> dict:
    """KS distance to N(0,1) plus sample skewness and (non-excess) kurtosis."""
    x = np.asarray(samples, dtype=np.float64)
    return {
        "ks": float(stats.kstest(x, "norm").statistic),
        "skew": float(stats.skew(x)),
        "kurtosis": float(stats.kurtosis(x, fisher=False)),
        "var": float(np.var(x)),
    }


def loglog_slope(xs, ys, window=None) -> float:
    """Least-squares slope of ``log y`` against ``log x``.

    ``window`` is an inclusive ``(x_min, x_max)`` range, or a slice of indices.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if isinstance(window, slice):
        xs, ys = xs[window], ys[window]
    elif window is not None:
        lo, hi = window
        sel = (xs >= lo * (1 - 1e-12)) & (xs <= hi * (1 + 1e-12))
        xs, ys = xs[sel], ys[sel]
    if xs.size < 3:
        raise ParameterDomainError("slope window must contain at least 3 points")
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise ParameterDomainError("log-log slope needs strictly positive data")
    slope, _ = np.polyfit(np.log(xs), np.log(ys), 1)
    return float(slope)
