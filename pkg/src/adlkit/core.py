"""Shared domain types, parameter normalization and seeded random streams.

Two parametrizations of Adaptive Langevin dynamics are supported:

* the *raw* form with thermal mass ``nu``, friction variable ``zeta`` and
  noise amplitudes ``sigma_A`` (applied) / ``sigma_G`` (gradient), and
* the *normalized* form with ``epsilon = sqrt(nu)`` and the rescaled friction
  ``xi = epsilon * (zeta - gamma)``, whose invariant measure no longer depends
  on ``nu``.

The mass matrix is the identity throughout.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import ConversionError, DegenerateNoiseError, ParameterDomainError

_U64 = (1 << 64) - 1


class Form(enum.Enum):
    NORMALIZED = "normalized"
    RAW = "raw"


@dataclass(frozen=True)
class SamplerState:
    """One point (or a batch of points) of the extended phase space.

    ``q`` and ``p`` have shape ``(..., n)``; ``friction`` has the matching
    leading shape ``(...)``. A plain single state has ``q.shape == (n,)`` and a
    scalar friction. Leading axes are used for replica ensembles.
    """

    q: np.ndarray
    p: np.ndarray
    friction: np.ndarray
    form: Form = Form.NORMALIZED

    def __post_init__(self):
        q = np.array(self.q, dtype=np.float64)
        p = np.array(self.p, dtype=np.float64)
        f = np.array(self.friction, dtype=np.float64)
        if q.ndim == 0:
            q = q.reshape(1)
        if p.ndim == 0:
            p = p.reshape(1)
        if q.shape != p.shape or q.shape[-1] < 1:
            raise ParameterDomainError(
                f"q and p must have equal shape (..., n>=1); got {q.shape} and {p.shape}"
            )
        if f.shape != q.shape[:-1]:
            raise ParameterDomainError(
                f"friction shape {f.shape} does not match batch shape {q.shape[:-1]}"
            )
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(p)) and np.all(np.isfinite(f))):
            raise ParameterDomainError("state entries must be finite")
        for arr in (q, p, f):
            arr.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "friction", f)
        object.__setattr__(self, "form", Form(self.form))

    @property
    def n(self) -> int:
        return self.q.shape[-1]

    @property
    def batch_shape(self) -> tuple:
        return self.q.shape[:-1]


@dataclass(frozen=True)
class RawParams:
    nu: float
    sigma_A: float
    sigma_G: float


@dataclass(frozen=True)
class DynamicsParams:
    """Parameters of the normalized dynamics, optionally with the raw record.

    gamma is the effective friction ``beta * (sigma_A**2 + sigma_G**2) / 2`` and
    epsilon the square root of the thermal mass.
    """

    beta: float
    gamma: float
    epsilon: float
    n: int = 1
    raw: Optional[RawParams] = None

    def __post_init__(self):
        for name in ("beta", "gamma", "epsilon"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ParameterDomainError(f"{name} must be a positive finite real, got {value!r}")
            object.__setattr__(self, name, float(value))
        if int(self.n) != self.n or self.n < 1:
            raise ParameterDomainError(f"n must be a positive integer, got {self.n!r}")
        object.__setattr__(self, "n", int(self.n))
        if self.raw is not None:
            raw = self.raw
            if not math.isclose(raw.nu, self.epsilon**2, rel_tol=1e-12):
                raise ParameterDomainError("raw.nu must equal epsilon**2")
            expected = self.beta * (raw.sigma_A**2 + raw.sigma_G**2) / 2.0
            if not math.isclose(expected, self.gamma, rel_tol=1e-12):
                raise ParameterDomainError(
                    "gamma must equal beta*(sigma_A**2+sigma_G**2)/2 for the raw record"
                )

    @property
    def nu(self) -> float:
        return self.raw.nu if self.raw is not None else self.epsilon**2

    @property
    def noise_amplitude(self) -> float:
        """Amplitude sqrt(2 gamma / beta) of the white noise in the normalized SDE."""
        return math.sqrt(2.0 * self.gamma / self.beta)

    def with_dimension(self, n: int) -> "DynamicsParams":
        return replace(self, n=n)


def normalize_params(beta, nu, sigma_A, sigma_G, n=1) -> DynamicsParams:
    """Build normalized parameters from the raw (beta, nu, sigma_A, sigma_G) form."""
    for name, value in (("beta", beta), ("nu", nu)):
        if not (math.isfinite(value) and value > 0):
            raise ParameterDomainError(f"{name} must be positive, got {value!r}")
    for name, value in (("sigma_A", sigma_A), ("sigma_G", sigma_G)):
        if not (math.isfinite(value) and value >= 0):
            raise ParameterDomainError(f"{name} must be nonnegative, got {value!r}")
    s2 = sigma_A**2 + sigma_G**2
    if s2 == 0:
        raise DegenerateNoiseError("sigma_A = sigma_G = 0 gives gamma = 0, which is not admitted")
    return DynamicsParams(
        beta=beta,
        gamma=beta * s2 / 2.0,
        epsilon=math.sqrt(nu),
        n=n,
        raw=RawParams(nu=float(nu), sigma_A=float(sigma_A), sigma_G=float(sigma_G)),
    )


def raw_params_for(params: DynamicsParams, sigma_G: float = 0.0) -> DynamicsParams:
    """Attach a raw record to normalized params, putting the remaining noise into sigma_A.

    The split between applied and gradient noise is not identifiable from gamma
    alone; callers pick sigma_G explicitly.
    """
    s2 = 2.0 * params.gamma / params.beta
    if sigma_G**2 > s2 * (1 + 1e-12):
        raise ParameterDomainError("sigma_G too large for the given gamma")
    sigma_A = math.sqrt(max(s2 - sigma_G**2, 0.0))
    return replace(params, raw=RawParams(nu=params.epsilon**2, sigma_A=sigma_A, sigma_G=sigma_G))


def friction_convert(state: SamplerState, params: DynamicsParams, target_form) -> SamplerState:
    """Map the friction variable between xi (normalized) and zeta (raw)."""
    target = Form(target_form)
    if state.form is target:
        return state
    if target is Form.RAW:
        if params.raw is None:
            raise ConversionError("conversion to raw form needs params.raw")
        zeta = params.gamma + state.friction / params.epsilon
        return SamplerState(state.q, state.p, zeta, Form.RAW)
    xi = params.epsilon * (state.friction - params.gamma)
    return SamplerState(state.q, state.p, xi, Form.NORMALIZED)


def _as_u64(value, name):
    value = int(value)
    if value < 0 or value > _U64:
        raise ParameterDomainError(f"{name} must fit in an unsigned 64-bit integer, got {value}")
    return value


@dataclass
class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Backed by the Philox-4x64 generator with the 128-bit key set to
    ``(seed, stream_id)``. The top word of the 256-bit counter selects a
    substream so that independent purposes (Gaussian forces, minibatch
    indices) never share counter ranges. A stream is owned by one worker.
    """

    seed: int
    stream_id: int
    substream: int = 0
    _generator: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self.seed = _as_u64(self.seed, "seed")
        self.stream_id = _as_u64(self.stream_id, "stream_id")
        self.substream = _as_u64(self.substream, "substream")
        bitgen = np.random.Philox(
            counter=np.array([0, 0, 0, self.substream], dtype=np.uint64),
            key=np.array([self.seed, self.stream_id], dtype=np.uint64),
        )
        self._generator = np.random.Generator(bitgen)

    def child(self, substream: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id, substream)

    def gaussian(self, size) -> np.ndarray:
        return self._generator.standard_normal(size)

    def uniform(self, size=None):
        return self._generator.random(size)

    def integers(self, high, size) -> np.ndarray:
        return self._generator.integers(0, high, size=size)


def rng_derive(seed: int, stream_id: int) -> RngStream:
    return RngStream(seed, stream_id)


def rng_gaussian(stream: RngStream, count: int) -> np.ndarray:
    return stream.gaussian(count)


def gaussian_block(streams, shape) -> np.ndarray:
    """Stack ``shape``-sized standard normal draws from each stream.

    Row ``i`` depends only on ``streams[i]`` and how much of it was consumed
    before, so the result is independent of how replicas are batched.
    """
    shape = tuple(np.atleast_1d(shape))
    out = np.empty((len(streams),) + shape)
    for i, stream in enumerate(streams):
        out[i] = stream.gaussian(shape)
    return out
