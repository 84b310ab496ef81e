"""Splitting integrators for Adaptive Langevin dynamics.

BADODAB discretizes the normalized SDE (friction variable xi) with exact
gradients; ODABADO discretizes the raw SDE (friction variable zeta) and
accepts stochastic gradients. Both act on batches of replicas: positions and
momenta have shape ``(N, n)``, the friction has shape ``(N,)``.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import DynamicsParams, Form, RngStream, SamplerState
from .errors import ConfigError, DivergenceError, ParameterDomainError
from .observables import parse_observables
from .potentials import ExactGradient, PotentialModel

log = logging.getLogger(__name__)

DIVERGENCE_THRESHOLD = 1e100
_SERIES_CUTOFF = 1e-4


@dataclass(frozen=True)
class StepConfig:
    dt: float
    K: int
    thinning: int = 1

    def __post_init__(self):
        if not (math.isfinite(self.dt) and self.dt > 0):
            raise ParameterDomainError(f"dt must be positive, got {self.dt!r}")
        if int(self.K) != self.K or self.K < 0:
            raise ParameterDomainError(f"K must be a nonnegative integer, got {self.K!r}")
        if int(self.thinning) != self.thinning or self.thinning < 1:
            raise ParameterDomainError(f"thinning must be >= 1, got {self.thinning!r}")
        object.__setattr__(self, "K", int(self.K))
        object.__setattr__(self, "thinning", int(self.thinning))


@dataclass(frozen=True)
class ObservableSeries:
    names: list
    values: np.ndarray  # (rows, observables)
    times: np.ndarray
    thinning: int = 1
    final_state: SamplerState = None

    def column(self, name) -> np.ndarray:
        return self.values[:, self.names.index(name)]


def ou_coefficients(zeta, sigma, dt):
    """Coefficients of the exact update ``p <- alpha p + G R`` for dp = -zeta p dt + sigma dW.

    Vectorized over ``zeta``. Negative ``zeta`` is allowed. Near ``zeta = 0`` the
    variance factor is evaluated by its Taylor series.
    """
    zeta = np.asarray(zeta, dtype=np.float64)
    x = 2.0 * dt * zeta
    alpha = np.exp(-dt * zeta)
    small = np.abs(x) < _SERIES_CUTOFF
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(small, 1.0, -np.expm1(-x) / np.where(small, 1.0, x))
    series = 1.0 - x / 2.0 + x * x / 6.0 - x**3 / 24.0
    ratio = np.where(small, series, ratio)
    G = sigma * np.sqrt(dt * ratio)
    if alpha.ndim == 0:
        return float(alpha), float(G)
    return alpha, G


def _check_finite(q, p, f, step):
    bad = ~(
        np.all(np.isfinite(q) & (np.abs(q) <= DIVERGENCE_THRESHOLD), axis=-1)
        & np.all(np.isfinite(p) & (np.abs(p) <= DIVERGENCE_THRESHOLD), axis=-1)
        & np.isfinite(f)
        & (np.abs(f) <= DIVERGENCE_THRESHOLD)
    )
    return bad


def _as_gradient(source):
    return ExactGradient(source) if isinstance(source, PotentialModel) else source


class BADODAB:
    """B A D O D A B splitting of the normalized dynamics.

    Kick, half drift, half thermostat update, exact OU step with friction
    ``gamma + xi/epsilon``, then the mirrored stages.
    """

    form = Form.NORMALIZED
    draws_per_step = 1

    def __init__(self, params: DynamicsParams, model):
        self.params = params
        self.model = model
        self.grad = _as_gradient(model)
        self.sigma = params.noise_amplitude

    def check_dt(self, dt):
        if dt > self.params.epsilon / 10:
            warnings.warn(
                f"dt={dt} exceeds epsilon/10={self.params.epsilon / 10}; thermostat may be stiff",
                RuntimeWarning,
                stacklevel=3,
            )

    def step(self, q, p, xi, dt, noise, cache=None, rngs=None):
        prm = self.params
        n = q.shape[-1]
        h = 0.5 * dt
        kin = n / prm.beta
        g = self.grad(q) if cache is None else cache
        p = p - h * g
        q = q + h * p
        xi = xi + (h / prm.epsilon) * (np.sum(p * p, axis=-1) - kin)
        alpha, G = ou_coefficients(xi / prm.epsilon + prm.gamma, self.sigma, dt)
        p = np.asarray(alpha)[..., None] * p + np.asarray(G)[..., None] * noise[..., 0, :]
        xi = xi + (h / prm.epsilon) * (np.sum(p * p, axis=-1) - kin)
        q = q + h * p
        g = self.grad(q)
        p = p - h * g
        return q, p, xi, g


class ODABADO:
    """O D A B A D O splitting of the raw dynamics with a (possibly stochastic) gradient.

    The closing OU half step acts on the kicked momentum; see README for the
    choice.
    """

    form = Form.RAW
    draws_per_step = 2

    def __init__(self, params: DynamicsParams, gradient_source):
        if params.raw is None:
            raise ConfigError("ODABADO needs raw parameters (nu, sigma_A, sigma_G)")
        self.params = params
        self.grad = _as_gradient(gradient_source)
        self.sigma = params.raw.sigma_A

    def check_dt(self, dt):
        if dt > self.params.epsilon / 10:
            warnings.warn(
                f"dt={dt} exceeds epsilon/10={self.params.epsilon / 10}; thermostat may be stiff",
                RuntimeWarning,
                stacklevel=3,
            )

    def step(self, q, p, zeta, dt, noise, cache=None, rngs=None):
        prm = self.params
        n = q.shape[-1]
        h = 0.5 * dt
        kin = n / prm.beta
        nu = prm.raw.nu
        alpha, G = ou_coefficients(zeta, self.sigma, h)
        p = np.asarray(alpha)[..., None] * p
        if self.sigma > 0:
            p = p + np.asarray(G)[..., None] * noise[..., 0, :]
        zeta = zeta + (h / nu) * (np.sum(p * p, axis=-1) - kin)
        q = q + h * p
        g = self.grad(q, rngs) if getattr(self.grad, "stochastic", False) else self.grad(q)
        p = p - dt * g
        q = q + h * p
        zeta = zeta + (h / nu) * (np.sum(p * p, axis=-1) - kin)
        alpha, G = ou_coefficients(zeta, self.sigma, h)
        p = np.asarray(alpha)[..., None] * p
        if self.sigma > 0:
            p = p + np.asarray(G)[..., None] * noise[..., 1, :]
        return q, p, zeta, None


class NoiseFeed:
    """Per-step Gaussian draws for a batch of replicas, one stream per replica.

    Draws are prefetched in blocks of steps; since each stream is consumed
    strictly in order, the values do not depend on the block size.
    """

    def __init__(self, streams, draws_per_step, n, block_doubles=4_000_000):
        self.streams = list(streams)
        self.shape = (draws_per_step, n)
        per_step = max(1, len(self.streams) * draws_per_step * n)
        self.block = int(max(1, min(1024, block_doubles // per_step)))
        self._buf = None
        self._pos = self.block

    def next(self):
        if self._pos >= self.block:
            shape = (self.block,) + self.shape
            self._buf = np.stack([s.gaussian(shape) for s in self.streams])
            self._pos = 0
        out = self._buf[:, self._pos]
        self._pos += 1
        return out


def _as_batch(state: SamplerState):
    single = state.q.ndim == 1
    q = state.q.reshape(-1, state.n).copy()
    p = state.p.reshape(-1, state.n).copy()
    f = state.friction.reshape(-1).copy()
    return single, q, p, f


def _streams_for(rng, batch):
    if isinstance(rng, RngStream):
        return [rng]
    streams = list(rng)
    if len(streams) != batch:
        raise ConfigError(f"need one stream per replica: {len(streams)} streams for {batch} replicas")
    return streams


def _minibatch_streams(streams):
    return [s.child(1) for s in streams]


def _single_step(stepper, state, dt, rng):
    if state.form is not stepper.form:
        raise ConfigError(f"{type(stepper).__name__} expects a {stepper.form.value} state")
    single, q, p, f = _as_batch(state)
    if dt == 0:
        return state
    streams = _streams_for(rng, q.shape[0])
    noise = np.stack([s.gaussian((stepper.draws_per_step, q.shape[-1])) for s in streams])
    mb = _minibatch_streams(streams) if getattr(stepper.grad, "stochastic", False) else None
    q, p, f, _ = stepper.step(q, p, f, dt, noise, rngs=mb)
    if np.any(_check_finite(q, p, f, 0)):
        raise DivergenceError("non-finite or runaway state", step=1, last_state=state)
    if single:
        return SamplerState(q[0], p[0], f[0], stepper.form)
    shape = state.batch_shape
    return SamplerState(q.reshape(shape + (-1,)), p.reshape(shape + (-1,)), f.reshape(shape), stepper.form)


def badodab_step(state: SamplerState, params: DynamicsParams, model, dt: float, rng) -> SamplerState:
    """Advance a normalized-form state by one BADODAB step."""
    return _single_step(BADODAB(params, model), state, dt, rng)


def odabado_step(state: SamplerState, params: DynamicsParams, gradient_source, dt: float, rng) -> SamplerState:
    """Advance a raw-form state by one ODABADO step.

    Minibatch indices, when needed, come from substream 1 of ``rng``; a fresh
    child stream is created on every call, so for long runs use ``simulate``.
    """
    return _single_step(ODABADO(params, gradient_source), state, dt, rng)


def make_stepper(kind: str, params: DynamicsParams, model_or_grad):
    if kind.lower() == "badodab":
        return BADODAB(params, model_or_grad)
    if kind.lower() == "odabado":
        return ODABADO(params, model_or_grad)
    raise ConfigError(f"unknown integrator {kind!r}")


class Propagator:
    """Runs a stepper over a batch of replicas with per-replica streams.

    Replicas whose state diverges are frozen and flagged in ``excluded``;
    ``strict`` makes the first divergence raise instead.
    """

    def __init__(self, stepper, state: SamplerState, streams, dt, strict=False):
        if state.form is not stepper.form:
            raise ConfigError(f"{type(stepper).__name__} expects a {stepper.form.value} state")
        _, self.q, self.p, self.f = _as_batch(state)
        self.stepper = stepper
        self.dt = dt
        self.streams = _streams_for(streams, self.q.shape[0])
        needs_noise = stepper.sigma > 0
        self.feed = NoiseFeed(self.streams, stepper.draws_per_step, self.q.shape[-1]) if needs_noise else None
        self._zero = np.zeros((self.q.shape[0], stepper.draws_per_step, self.q.shape[-1]))
        self.mb = _minibatch_streams(self.streams) if getattr(stepper.grad, "stochastic", False) else None
        self.cache = None
        self.steps = 0
        self.strict = strict
        self.excluded = np.zeros(self.q.shape[0], dtype=bool)
        stepper.check_dt(dt)

    def advance(self):
        noise = self.feed.next() if self.feed is not None else self._zero
        last = (self.q, self.p, self.f)
        q, p, f, cache = self.stepper.step(self.q, self.p, self.f, self.dt, noise, self.cache, self.mb)
        self.steps += 1
        bad = _check_finite(q, p, f, self.steps)
        if np.any(bad & ~self.excluded):
            if self.strict:
                i = int(np.argmax(bad))
                last_state = SamplerState(last[0][i], last[1][i], last[2][i], self.stepper.form)
                raise DivergenceError("non-finite or runaway state", step=self.steps, last_state=last_state)
            self.excluded |= bad
        if np.any(self.excluded):
            q[self.excluded] = 0.0
            p[self.excluded] = 0.0
            f[self.excluded] = 0.0
            cache = None
        self.q, self.p, self.f, self.cache = q, p, f, cache

    def state(self) -> SamplerState:
        return SamplerState(self.q.copy(), self.p.copy(), self.f.copy(), self.stepper.form)


def simulate(init: SamplerState, stepper, step_config: StepConfig, observables: Sequence, rng) -> ObservableSeries:
    """Integrate one trajectory and record observables every ``thinning`` steps.

    Row ``j`` holds the observables at step ``j * thinning``; row 0 is the
    initial state. A divergence raises with the last finite state attached.
    """
    obs = parse_observables(observables)
    single = init.q.ndim == 1
    prop = Propagator(stepper, init, rng, step_config.dt, strict=True)
    rows = step_config.K // step_config.thinning + 1
    values = np.empty((rows, len(obs)) if single else (rows, prop.q.shape[0], len(obs)))

    def record(j):
        vals = np.stack([o(prop.q, prop.p, prop.f) for o in obs], axis=-1)
        values[j] = vals[0] if single else vals

    record(0)
    for k in range(1, step_config.K + 1):
        prop.advance()
        if k % step_config.thinning == 0:
            record(k // step_config.thinning)
    times = np.arange(rows) * step_config.thinning * step_config.dt
    final = prop.state()
    if single:
        final = SamplerState(final.q[0], final.p[0], final.friction[0], final.form)
    return ObservableSeries([o.name for o in obs], values, times, step_config.thinning, final)
