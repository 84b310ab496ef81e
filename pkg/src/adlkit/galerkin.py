"""Hermite spectral Galerkin discretization of the Adaptive Langevin generator.

Restricted to one dimension and the harmonic potential ``U(q) = q^2/2``, where
the tensor basis ``psi_{k,l,m}(p, xi, q) = h_k(p) h_l(xi) h_m(q)`` of
normalized Hermite polynomials turns every piece of the generator into a
sparse ladder operator. Stiffness matrices act on coefficient vectors:
``L (u . psi) = (A u) . psi``.

Flat indices follow ``I(k, l, m) = 1 + m + L k + L^2 l`` (one-based, as
returned by :func:`hash_index`); arrays use the zero-based ``I - 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from numpy.polynomial import hermite_e

from .errors import ConfigError, SingularOperatorError, StructureViolationError
from .observables import parse_observable

ZERO_TOL = 1e-10
STRUCTURE_TOL = -1e-8


def hermite_eval(l: int, x, beta: float = 1.0):
    """Normalized Hermite polynomial ``h_l(x) = He_l(sqrt(beta) x) / sqrt(l!)``.

    Orthonormal in ``L^2`` of the Gaussian with variance ``1/beta``. Uses the
    three-term recurrence of the normalized family directly.
    """
    if l < 0:
        raise ValueError("degree must be nonnegative")
    y = math.sqrt(beta) * np.asarray(x, dtype=np.float64)
    prev = np.ones_like(y)
    if l == 0:
        return prev if prev.ndim else float(prev)
    cur = y.copy()
    for j in range(1, l):
        prev, cur = cur, (y * cur - math.sqrt(j) * prev) / math.sqrt(j + 1)
    return cur if cur.ndim else float(cur)


def hash_index(k: int, l: int, m: int, L: int, masked: bool = False) -> int:
    """One-based flat index of basis function ``psi_{k,l,m}``.

    With ``masked=True`` out-of-range triples map to 0 instead of raising.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    inside = 0 <= k < L and 0 <= l < L and 0 <= m < L
    if not inside:
        if masked:
            return 0
        raise IndexError(f"(k, l, m) = ({k}, {l}, {m}) outside [0, {L - 1}]")
    return 1 + m + L * k + L * L * l


def _ladder_entries(L):
    """Yield ``(target, source, coefficient, piece)`` for every ladder term."""
    for k in range(L):
        for l in range(L):
            for m in range(L):
                src = hash_index(k, l, m, L) - 1
                terms = (
                    ("H", k + 1, l, m - 1, math.sqrt(m * (k + 1))),
                    ("H", k - 1, l, m + 1, -math.sqrt((m + 1) * k)),
                    ("NH", k, l - 1, m, k * math.sqrt(l)),
                    ("NH", k + 2, l - 1, m, math.sqrt((k + 1) * (k + 2) * l)),
                    ("NH", k, l + 1, m, -k * math.sqrt(l + 1)),
                    ("NH", k - 2, l + 1, m, -math.sqrt(max(k * (k - 1), 0) * (l + 1))),
                )
                for piece, kk, ll, mm, c in terms:
                    tgt = hash_index(kk, ll, mm, L, masked=True)
                    if tgt and c != 0.0:
                        yield tgt - 1, src, c, piece


@dataclass(frozen=True, eq=False)
class GalerkinOperator:
    """Stiffness matrix ``A = gamma A_OU + A_NH / epsilon + A_H`` and its pieces."""

    L: int
    beta: float
    gamma: float
    epsilon: float
    A_OU: np.ndarray = field(repr=False)
    A_NH: np.ndarray = field(repr=False)
    A_H: np.ndarray = field(repr=False)
    A: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return self.L**3

    @property
    def A0(self) -> np.ndarray:
        """Restriction to the mean-zero subspace (constant mode deleted)."""
        return self.A[1:, 1:]

    def with_params(self, gamma: float, epsilon: float) -> "GalerkinOperator":
        A = gamma * self.A_OU + self.A_NH / epsilon + self.A_H
        return GalerkinOperator(self.L, self.beta, gamma, epsilon, self.A_OU, self.A_NH, self.A_H, A)


def assemble_pieces(L: int, beta: float):
    N = L**3
    A_OU = np.zeros((N, N))
    A_NH = np.zeros((N, N))
    A_H = np.zeros((N, N))
    for k in range(L):
        for l in range(L):
            for m in range(L):
                i = hash_index(k, l, m, L) - 1
                A_OU[i, i] = -k
    nh_scale = 1.0 / math.sqrt(beta)
    for tgt, src, c, piece in _ladder_entries(L):
        if piece == "H":
            A_H[tgt, src] += c
        else:
            A_NH[tgt, src] += nh_scale * c
    return A_OU, A_NH, A_H


def assemble(L: int, beta: float, gamma: float, epsilon: float) -> GalerkinOperator:
    """Assemble the stiffness matrix on the ``L^3``-dimensional tensor basis."""
    if L < 2:
        raise ConfigError("Galerkin basis needs L >= 2")
    for name, v in (("beta", beta), ("gamma", gamma), ("epsilon", epsilon)):
        if not v > 0:
            raise ConfigError(f"{name} must be positive")
    A_OU, A_NH, A_H = assemble_pieces(L, beta)
    A = gamma * A_OU + A_NH / epsilon + A_H
    return GalerkinOperator(L, float(beta), float(gamma), float(epsilon), A_OU, A_NH, A_H, A)


def eigenvalues(op: GalerkinOperator) -> np.ndarray:
    """Eigenvalues of ``-A`` on the mean-zero subspace (LAPACK dgeev)."""
    try:
        return scipy.linalg.eigvals(-op.A0, check_finite=True)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise SingularOperatorError(f"eigensolver did not converge: {exc}") from None


def spectral_gap(op: GalerkinOperator) -> float:
    """Smallest real part of the spectrum of ``-A`` on mean-zero functions."""
    ev = eigenvalues(op)
    re = ev.real
    if np.any(re < STRUCTURE_TOL):
        raise StructureViolationError(
            f"eigenvalue with real part {re.min():.3e} < {STRUCTURE_TOL}: dissipativity violated"
        )
    return float(re.min())


def monomial_coefficients(power: int, L: int, beta: float) -> np.ndarray:
    """Coefficients ``c_j`` with ``x^power = sum_j c_j h_j(x)``, length L."""
    if power >= L:
        raise ConfigError(f"degree {power} needs L > {power}")
    unit = np.zeros(power + 1)
    unit[power] = 1.0
    he = hermite_e.poly2herme(unit)
    out = np.zeros(L)
    for j, c in enumerate(he):
        out[j] = c * math.sqrt(math.factorial(j)) * beta ** (-power / 2.0)
    return out


def observable_coefficients(name, L: int, beta: float) -> np.ndarray:
    """Mean-zero coefficient vector (length ``L^3``) of a polynomial observable."""
    obs = parse_observable(name)
    if obs.exponents is None:
        raise ConfigError(f"observable {name!r} is not a polynomial in (q, p, xi)")
    eq, ep, ex = obs.exponents
    cq = monomial_coefficients(eq, L, beta)
    cp = monomial_coefficients(ep, L, beta)
    cx = monomial_coefficients(ex, L, beta)
    # flat index m + L k + L^2 l  ->  array axes (l, k, m)
    u = np.einsum("l,k,m->lkm", cx, cp, cq).reshape(-1)
    u[0] = 0.0
    return u


def _solve(matrix, rhs):
    try:
        lu = scipy.linalg.lu_factor(matrix, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SingularOperatorError(str(exc)) from None
    if np.any(np.diag(lu[0]) == 0):
        raise SingularOperatorError("singular stiffness matrix", condition=math.inf)
    sol = scipy.linalg.lu_solve(lu, rhs)
    if not np.all(np.isfinite(sol)):
        cond = np.linalg.cond(matrix)
        raise SingularOperatorError(f"solve failed (condition estimate {cond:.3e})", condition=cond)
    return sol


def galerkin_variance(op: GalerkinOperator, coeffs) -> float:
    """Asymptotic variance ``2 <-L^{-1} phi0, phi0>`` in the Galerkin space."""
    phi = np.asarray(coeffs, dtype=np.float64)
    if phi.shape == (op.size,):
        phi = phi[1:]
    if phi.shape != (op.size - 1,):
        raise ConfigError("coefficient vector has the wrong length")
    if not np.any(phi):
        return 0.0
    u = _solve(op.A0, phi)
    sigma2 = float(-2.0 * u @ phi)
    if sigma2 < -1e-10:
        raise StructureViolationError(f"negative asymptotic variance {sigma2:.3e}")
    return sigma2


def langevin_pieces(L: int):
    """Two-variable (k, m) stiffness pieces of the underdamped Langevin generator.

    Flat index ``m + L k``; returns ``(A_OU', A_H')``.
    """
    N = L * L
    A_OU = np.zeros((N, N))
    A_H = np.zeros((N, N))
    for k in range(L):
        for m in range(L):
            src = m + L * k
            A_OU[src, src] = -k
            if m >= 1 and k + 1 < L:
                A_H[(m - 1) + L * (k + 1), src] += math.sqrt(m * (k + 1))
            if k >= 1 and m + 1 < L:
                A_H[(m + 1) + L * (k - 1), src] -= math.sqrt((m + 1) * k)
    return A_OU, A_H


def langevin_limit_variance(L: int, beta: float, gamma: float, observable) -> float:
    """Large thermal-mass limit of the asymptotic variance for an observable of (q, p).

    Solves the two Langevin Poisson problems for the centred observable and
    for ``p^2 - 1/beta`` and combines them: the plain Langevin variance, minus
    the momentum-gradient overlap term, plus the Hamiltonian coupling term.
    """
    obs = parse_observable(observable)
    if obs.exponents is None:
        raise ConfigError(f"observable {observable!r} is not a polynomial")
    eq, ep, ex = obs.exponents
    if ex:
        raise ConfigError("the Langevin limit applies to observables of (q, p) only")
    if L < 3:
        raise ConfigError("need L >= 3 to represent p^2")
    A_OU, A_H = langevin_pieces(L)
    A = A_H + gamma * A_OU
    A0 = A[1:, 1:]

    phi = np.outer(monomial_coefficients(ep, L, beta), monomial_coefficients(eq, L, beta)).reshape(-1)
    phi[0] = 0.0
    if not np.any(phi):
        return 0.0
    kin = np.zeros(L * L)
    kin[2 * L] = math.sqrt(2.0) / beta  # p^2 - 1/beta
    phi0 = np.concatenate([[0.0], -_solve(A0, phi[1:])])
    phim1 = np.concatenate([[0.0], -_solve(A0, kin[1:])])

    kdeg = np.repeat(np.arange(L), L)  # momentum degree of flat index m + L k

    def grad_p_inner(a, b):
        # d/dp psi_{k,m} = sqrt(beta k) psi_{k-1,m}
        return float(np.sum(beta * kdeg * a * b))

    g00 = grad_p_inner(phi0, phi0)
    g11 = grad_p_inner(phim1, phim1)
    g10 = grad_p_inner(phim1, phi0)
    h10 = float(phim1 @ (A_H @ phi0))
    return (2.0 / beta) * (gamma * g00 - gamma * g10**2 / g11 + beta**2 * h10**2 / (gamma * g11))
