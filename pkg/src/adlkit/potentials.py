"""Potential energies with exact gradients, and the logistic-regression posterior.

All models evaluate on batches: ``q`` has shape ``(..., n)``, energies come
back with shape ``(...)`` and gradients with the shape of ``q``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, ParameterDomainError, ParseError, RankError

DEFAULT_PRIOR_SIGMA2 = 100.0


def sigmoid(t):
    """Logistic function evaluated without overflow for large ``|t|``."""
    t = np.asarray(t, dtype=np.float64)
    flat = np.atleast_1d(t)
    out = np.empty_like(flat)
    pos = flat >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-flat[pos]))
    e = np.exp(flat[~pos])
    out[~pos] = e / (1.0 + e)
    return out.reshape(t.shape) if t.ndim else float(out[0])


def _check_q(q, n):
    q = np.asarray(q, dtype=np.float64)
    if q.ndim == 0:
        q = q.reshape(1)
    if q.shape[-1] != n:
        raise ParameterDomainError(f"expected q with last dimension {n}, got shape {q.shape}")
    return q


class PotentialModel:
    """Base class; subclasses implement ``_energy`` and ``_gradient``."""

    kind = "abstract"
    n: int = 1

    def energy(self, q):
        return self._energy(_check_q(q, self.n))

    def gradient(self, q):
        return self._gradient(_check_q(q, self.n))

    def evaluate(self, q):
        q = _check_q(q, self.n)
        return self._energy(q), self._gradient(q)

    def describe(self) -> dict:
        return {"kind": self.kind, "n": self.n}


@dataclass(frozen=True)
class Harmonic(PotentialModel):
    """U(q) = |q|^2 / 2."""

    n: int = 1
    kind = "harmonic"

    def _energy(self, q):
        return 0.5 * np.sum(q * q, axis=-1)

    def _gradient(self, q):
        return q.copy()


@dataclass(frozen=True)
class DoubleWell(PotentialModel):
    """Skewed double well ``U(q) = (b/a)(q^2 - a)^2 + c q`` summed over coordinates.

    The default (a, b, c) = (1, 1, 1/2) tilts the landscape towards the left well.
    """

    a: float = 1.0
    b: float = 1.0
    c: float = 0.5
    n: int = 1
    kind = "double_well"

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ParameterDomainError("double well needs a > 0 and b > 0 to be confining")

    def _energy(self, q):
        return np.sum((self.b / self.a) * (q * q - self.a) ** 2 + self.c * q, axis=-1)

    def _gradient(self, q):
        return (4.0 * self.b / self.a) * q * (q * q - self.a) + self.c

    def describe(self):
        return {"kind": self.kind, "n": self.n, "a": self.a, "b": self.b, "c": self.c}


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64)
        y = np.array(self.labels)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if x.ndim != 2 or x.shape[0] < 1:
            raise DataError("dataset must have at least one row")
        if y.shape != (x.shape[0],):
            raise DataError("labels must be a vector with one entry per row")
        if not np.all(np.isfinite(x)):
            raise DataError("non-finite feature value")
        if not np.all((y == 0) | (y == 1)):
            raise DataError("labels must be 0 or 1")
        if self.split not in ("train", "test"):
            raise DataError(f"unknown split tag {self.split!r}")
        x.setflags(write=False)
        y = y.astype(np.float64)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class GradientEstimate:
    value: np.ndarray
    minibatch_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


@dataclass(frozen=True, eq=False)
class BlrPosterior(PotentialModel):
    """Negative log posterior of Bayesian logistic regression with a Gaussian prior."""

    dataset: Dataset = None
    prior_sigma2: float = DEFAULT_PRIOR_SIGMA2
    kind = "blr"

    def __post_init__(self):
        if self.dataset is None:
            raise DataError("BlrPosterior needs a dataset")
        if not self.prior_sigma2 > 0:
            raise ParameterDomainError("prior_sigma2 must be positive")

    @property
    def n(self):
        return self.dataset.dim

    def _energy(self, q):
        t = q @ self.dataset.features.T
        nll = np.logaddexp(0.0, t) - t * self.dataset.labels
        return 0.5 * np.sum(q * q, axis=-1) / self.prior_sigma2 + nll.sum(axis=-1)

    def _gradient(self, q):
        return blr_full_gradient(self.dataset, self.prior_sigma2, q).value

    def describe(self):
        return {
            "kind": self.kind,
            "n": self.n,
            "train_size": self.dataset.size,
            "prior_sigma2": self.prior_sigma2,
        }


def evaluate(model: PotentialModel, q):
    """Return ``(U(q), grad U(q))``."""
    return model.evaluate(q)


def blr_full_gradient(dataset: Dataset, prior_sigma2: float, q) -> GradientEstimate:
    q = _check_q(q, dataset.dim)
    x = dataset.features
    resid = sigmoid(q @ x.T) - dataset.labels
    value = q / prior_sigma2 + resid @ x
    return GradientEstimate(value)


def blr_minibatch_gradient(dataset: Dataset, prior_sigma2: float, q, m: int, rng) -> GradientEstimate:
    """Unbiased gradient estimate from ``m`` indices drawn uniformly with replacement."""
    if m < 1:
        raise ParameterDomainError(f"minibatch size must be >= 1, got {m}")
    q = _check_q(q, dataset.dim)
    idx = rng.integers(dataset.size, (m,))
    return GradientEstimate(_minibatch_value(dataset, prior_sigma2, q, idx), idx)


def _minibatch_value(dataset, prior_sigma2, q, idx):
    # idx has shape q.shape[:-1] + (m,)
    xb = dataset.features[idx]
    yb = dataset.labels[idx]
    t = np.einsum("...md,...d->...m", xb, q)
    resid = sigmoid(t) - yb
    scale = dataset.size / idx.shape[-1]
    return q / prior_sigma2 + scale * np.einsum("...m,...md->...d", resid, xb)


class ExactGradient:
    """Gradient source returning the exact gradient of a model."""

    stochastic = False

    def __init__(self, model: PotentialModel):
        self.model = model

    def __call__(self, q, rngs=None):
        return self.model.gradient(q)


class MinibatchGradient:
    """Minibatch gradient source for a logistic-regression posterior.

    ``rngs`` is a sequence with one stream per leading batch entry of ``q``
    (or a single stream for an unbatched ``q``).
    """

    stochastic = True

    def __init__(self, model: BlrPosterior, m: int):
        if m < 1:
            raise ParameterDomainError(f"minibatch size must be >= 1, got {m}")
        self.model = model
        self.m = int(m)

    def __call__(self, q, rngs):
        q = _check_q(q, self.model.n)
        size = self.model.dataset.size
        if q.ndim == 1:
            idx = rngs.integers(size, (self.m,))
        else:
            idx = np.stack([r.integers(size, (self.m,)) for r in rngs])
        return _minibatch_value(self.model.dataset, self.model.prior_sigma2, q, idx)


def load_dataset(path, header: bool = False, split: str = "train") -> Dataset:
    """Read a comma-separated file whose last column is a 0/1 label."""
    rows, labels = [], []
    width = None
    with open(Path(path), "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if header and lineno == 1:
                continue
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) < 2:
                raise ParseError("need at least one feature and a label", lineno)
            if width is None:
                width = len(parts)
            elif len(parts) != width:
                raise ParseError(f"expected {width} columns, found {len(parts)}", lineno)
            try:
                values = [float(v.replace("−", "-")) for v in parts[:-1]]
                label = float(parts[-1])
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
            if label not in (0.0, 1.0):
                raise DataError(f"line {lineno}: label {parts[-1]!r} not in {{0,1}}")
            if not all(math.isfinite(v) for v in values):
                raise DataError(f"line {lineno}: non-finite feature")
            rows.append(values)
            labels.append(label)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return Dataset(np.array(rows), np.array(labels), split)


def save_dataset(dataset: Dataset, path) -> None:
    with open(Path(path), "w", encoding="utf-8") as fh:
        for row, label in zip(dataset.features, dataset.labels):
            fh.write(",".join(repr(float(v)) for v in row) + f",{int(label)}\n")


@dataclass(frozen=True)
class PcaWhitener:
    mean: np.ndarray
    components: np.ndarray  # (d, k), columns are loadings
    scales: np.ndarray  # sqrt of retained train variances

    def transform(self, x):
        return ((np.asarray(x) - self.mean) @ self.components) / self.scales


def fit_pca_whitener(features, k: int, rank_tol: float = 1e-10) -> PcaWhitener:
    x = np.asarray(features, dtype=np.float64)
    d = x.shape[1]
    if not 1 <= k <= d:
        raise RankError(f"k={k} must lie in [1, {d}]")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / x.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    top = evals[0] if evals[0] > 0 else 0.0
    rank = int(np.sum(evals > rank_tol * max(top, np.finfo(float).tiny)))
    if k > rank:
        raise RankError(f"k={k} exceeds effective rank {rank} of the training covariance", rank)
    comps = evecs[:, :k].copy()
    pivot = np.argmax(np.abs(comps), axis=0)
    signs = np.sign(comps[pivot, np.arange(k)])
    comps *= signs
    return PcaWhitener(mean, comps, np.sqrt(evals[:k]))


def pca_whiten(train: Dataset, test: Optional[Dataset], k: int):
    """Project onto the top-k train principal components with unit train variance.

    Test data is transformed with train statistics only.
    """
    w = fit_pca_whitener(train.features, k)
    new_train = Dataset(w.transform(train.features), train.labels, train.split)
    new_test = None
    if test is not None:
        if test.dim != train.dim:
            raise DataError("train and test feature dimensions differ")
        new_test = Dataset(w.transform(test.features), test.labels, test.split)
    return new_train, new_test


def make_synthetic_logistic(size: int, q_star: Sequence[float], rng, split="train") -> Dataset:
    """Draw features ~ N(0, I) and labels from the logistic model with weights ``q_star``."""
    q_star = np.asarray(q_star, dtype=np.float64)
    x = rng.gaussian((size, q_star.size))
    y = (rng.uniform(size) < sigmoid(x @ q_star)).astype(np.float64)
    return Dataset(x, y, split)


def average_test_likelihood(dataset: Dataset, q):
    """Mean predictive likelihood ``p(y|x,q)`` over a dataset; batched over ``q``."""
    q = _check_q(q, dataset.dim)
    s = sigmoid(q @ dataset.features.T)
    lik = np.where(dataset.labels == 1.0, s, 1.0 - s)
    return lik.mean(axis=-1)


def build_model(kind: str, **kw) -> PotentialModel:
    if kind == "harmonic":
        return Harmonic(n=int(kw.get("n", 1)))
    if kind in ("double_well", "doublewell", "dw"):
        return DoubleWell(
            a=float(kw.get("a", 1.0)),
            b=float(kw.get("b", 1.0)),
            c=float(kw.get("c", 0.5)),
            n=int(kw.get("n", 1)),
        )
    raise ParameterDomainError(f"unknown potential {kind!r}")
