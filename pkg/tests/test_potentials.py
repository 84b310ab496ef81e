import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adlkit.core import rng_derive
from adlkit.errors import DataError, ParameterDomainError, ParseError, RankError
from adlkit.potentials import (
    BlrPosterior,
    Dataset,
    DoubleWell,
    ExactGradient,
    Harmonic,
    MinibatchGradient,
    _minibatch_value,
    average_test_likelihood,
    blr_full_gradient,
    blr_minibatch_gradient,
    build_model,
    evaluate,
    fit_pca_whitener,
    load_dataset,
    make_synthetic_logistic,
    pca_whiten,
    save_dataset,
    sigmoid,
)


def small_dataset(seed=0, size=5, d=3):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(size, d))
    y = (rng.random(size) < 0.5).astype(float)
    return Dataset(x, y)


def test_harmonic_minimum():
    u, g = evaluate(Harmonic(), [0.0])
    assert u == 0.0 and g[0] == 0.0


def test_double_well_values():
    u, g = evaluate(DoubleWell(1.0, 1.0, 0.5), [0.0])
    assert u == pytest.approx(1.0) and g[0] == pytest.approx(0.5)
    u, g = evaluate(DoubleWell(1.0, 4.0, 0.5), [1.0])
    assert u == pytest.approx(0.5) and g[0] == pytest.approx(0.5)


def test_double_well_rejects_nonconfining():
    with pytest.raises(ParameterDomainError):
        DoubleWell(a=0.0)
    with pytest.raises(ParameterDomainError):
        DoubleWell(b=-1.0)


def test_dimension_mismatch():
    with pytest.raises(ParameterDomainError):
        Harmonic(n=2).gradient([1.0, 2.0, 3.0])


def _fd_check(model, probes):
    h = 1e-5
    for q in probes:
        g = model.gradient(q)
        fd = np.array(
            [(model.energy(q + h * e) - model.energy(q - h * e)) / (2 * h) for e in np.eye(q.size)]
        )
        assert np.allclose(fd, g, rtol=1e-6, atol=1e-6 * (1 + np.abs(g).max()))


@pytest.mark.parametrize(
    "model",
    [Harmonic(n=3), DoubleWell(1.0, 1.0, 0.5), DoubleWell(2.0, 3.0, -0.7, n=2),
     BlrPosterior(small_dataset(size=20, d=4), 100.0)],
    ids=["harmonic", "dw", "dw2", "blr"],
)
def test_gradient_matches_finite_differences(model):
    rng = np.random.default_rng(1)
    _fd_check(model, [rng.normal(size=model.n) for _ in range(100)])


def test_batched_evaluation_matches_rowwise():
    model = BlrPosterior(small_dataset(size=30), 10.0)
    q = np.random.default_rng(3).normal(size=(4, 2, 3))
    e, g = model.evaluate(q)
    assert e.shape == (4, 2) and g.shape == q.shape
    for i, j in itertools.product(range(4), range(2)):
        ei, gi = model.evaluate(q[i, j])
        assert e[i, j] == pytest.approx(ei, rel=1e-13) and np.allclose(g[i, j], gi, rtol=1e-13)


def test_sigmoid_stable():
    t = np.array([-1000.0, -30.0, 0.0, 30.0, 1000.0])
    s = sigmoid(t)
    assert np.all(np.isfinite(s))
    assert s[2] == 0.5 and s[0] == 0.0 and s[-1] == 1.0
    assert np.allclose(sigmoid(-t), 1 - s)
    assert sigmoid(0.0) == 0.5


def test_blr_gradient_at_zero():
    ds = small_dataset(2)
    g = blr_full_gradient(ds, 100.0, np.zeros(ds.dim))
    assert np.allclose(g.value, (0.5 - ds.labels) @ ds.features)
    assert g.minibatch_indices.size == 0


def test_blr_single_point():
    ds = Dataset(np.array([[1.0]]), np.array([1.0]))
    g = blr_full_gradient(ds, 1e12, np.zeros(1))
    assert g.value[0] == pytest.approx(-0.5)


def test_blr_label_flip_symmetry():
    ds = small_dataset(4, size=8)
    flipped = Dataset(-ds.features, 1 - ds.labels)
    q = np.array([0.3, -1.2, 2.0])
    assert np.allclose(blr_full_gradient(ds, 100, q).value, blr_full_gradient(flipped, 100, q).value, atol=1e-14)


def test_blr_energy_extreme_q_finite():
    model = BlrPosterior(small_dataset(size=10), 100.0)
    e, g = model.evaluate(np.full(3, 1e4))
    assert np.isfinite(e) and np.all(np.isfinite(g))


@pytest.mark.parametrize("size", [1, 2, 3, 4, 5])
def test_minibatch_unbiased_by_enumeration(size):
    ds = small_dataset(10 + size, size=size)
    q = np.array([0.4, -0.3, 1.1])
    exact = blr_full_gradient(ds, 100.0, q).value
    for m in range(1, size + 1):
        tuples = np.array(list(itertools.product(range(size), repeat=m)))
        vals = _minibatch_value(ds, 100.0, np.broadcast_to(q, (len(tuples), 3)), tuples)
        assert np.allclose(vals.mean(axis=0), exact, rtol=0, atol=1e-12 * (1 + np.abs(exact).max()))


def test_minibatch_single_point_dataset():
    ds = Dataset(np.array([[2.0, -1.0]]), np.array([0.0]))
    q = np.array([0.1, 0.2])
    exact = blr_full_gradient(ds, 100, q).value
    for m in (1, 4):
        est = blr_minibatch_gradient(ds, 100, q, m, rng_derive(0, 0))
        assert np.allclose(est.value, exact, rtol=1e-14)
        assert est.minibatch_indices.shape == (m,)


def test_minibatch_variance_scales_inverse_m():
    ds = small_dataset(7, size=6)
    q = np.array([0.2, 0.1, -0.5])
    rng = rng_derive(11, 0)
    var = {}
    for m in (1, 4, 16):
        draws = np.array([blr_minibatch_gradient(ds, 100, q, m, rng).value for _ in range(10_000)])
        var[m] = draws.var(axis=0).sum()
    assert var[1] / var[4] == pytest.approx(4, rel=0.1)
    assert var[4] / var[16] == pytest.approx(4, rel=0.1)


def test_minibatch_m_positive():
    ds = small_dataset()
    with pytest.raises(ParameterDomainError):
        blr_minibatch_gradient(ds, 100, np.zeros(3), 0, rng_derive(0, 0))
    with pytest.raises(ParameterDomainError):
        MinibatchGradient(BlrPosterior(ds), 0)


def test_minibatch_source_batched_streams():
    model = BlrPosterior(small_dataset(size=50), 100.0)
    src = MinibatchGradient(model, 10)
    q = np.zeros((3, 3))
    a = src(q, [rng_derive(1, i) for i in range(3)])
    b = np.stack([src(q[i], rng_derive(1, i)) for i in range(3)])
    assert np.allclose(a, b)
    assert ExactGradient(model)(q).shape == (3, 3)


def test_dataset_validation():
    with pytest.raises(DataError):
        Dataset(np.ones((2, 1)), np.array([0.0, 2.0]))
    with pytest.raises(DataError):
        Dataset(np.array([[np.inf]]), np.array([1.0]))
    with pytest.raises(DataError):
        Dataset(np.ones((2, 1)), np.array([0.0]))
    with pytest.raises(DataError):
        Dataset(np.ones((1, 1)), np.array([0.0]), split="valid")


def test_load_dataset(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("1.0,0\n-1.0,1\n")
    ds = load_dataset(p)
    assert ds.size == 2 and ds.dim == 1
    assert list(ds.features[:, 0]) == [1.0, -1.0] and list(ds.labels) == [0.0, 1.0]


def test_load_dataset_header(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("x1,x2,y\n1,2,1\n3,4,0\n")
    assert load_dataset(p, header=True).size == 2
    with pytest.raises(ParseError):
        load_dataset(p)


def test_load_dataset_errors(tmp_path):
    empty = tmp_path / "e.csv"
    empty.write_text("")
    with pytest.raises(DataError):
        load_dataset(empty)
    bad = tmp_path / "b.csv"
    bad.write_text("1,0\n2,3,1\n")
    with pytest.raises(ParseError) as info:
        load_dataset(bad)
    assert info.value.line == 2
    lab = tmp_path / "l.csv"
    lab.write_text("1,0\n2,2\n")
    with pytest.raises(DataError):
        load_dataset(lab)


def test_save_load_roundtrip(tmp_path):
    ds = small_dataset(5, size=7)
    save_dataset(ds, tmp_path / "r.csv")
    back = load_dataset(tmp_path / "r.csv")
    assert np.array_equal(back.features, ds.features) and np.array_equal(back.labels, ds.labels)


def test_pca_diagonal_covariance():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(4000, 2))
    z -= z.mean(axis=0)
    # exact diag(4, 1) sample covariance
    c = np.linalg.cholesky(z.T @ z / len(z))
    x = (z @ np.linalg.inv(c).T) * np.array([2.0, 1.0])
    ds = Dataset(x, np.zeros(len(x)))
    w = fit_pca_whitener(x, 2)
    assert np.allclose(np.abs(w.components), np.eye(2), atol=1e-8)
    assert np.allclose(w.scales, [2.0, 1.0])
    out, _ = pca_whiten(ds, None, 2)
    assert np.allclose(np.abs(out.features), np.abs(x) / np.array([2.0, 1.0]), atol=1e-8)


@given(seed=st.integers(0, 2**31), k=st.integers(1, 4))
@settings(max_examples=25, deadline=None)
def test_pca_whitened_train_covariance(seed, k):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(200, 4)) @ rng.normal(size=(4, 4)) + rng.normal(size=4)
    train = Dataset(x, np.zeros(200))
    test = Dataset(rng.normal(size=(10, 4)), np.ones(10), split="test")
    a, b = pca_whiten(train, test, k)
    cov = np.cov(a.features.T, bias=True).reshape(k, k)
    assert np.allclose(cov, np.eye(k), atol=1e-8)
    assert b.dim == k
    w = fit_pca_whitener(x, k)
    assert np.allclose(b.features, w.transform(test.features))
    # sign convention: largest-magnitude loading positive
    piv = np.argmax(np.abs(w.components), axis=0)
    assert np.all(w.components[piv, np.arange(k)] > 0)


def test_pca_rank_error():
    x = np.column_stack([np.random.default_rng(0).normal(size=50), np.ones(50)])
    with pytest.raises(RankError) as info:
        fit_pca_whitener(x, 2)
    assert info.value.effective_rank == 1


def test_synthetic_data_and_likelihood():
    ds = make_synthetic_logistic(3000, [2.0, -1.0], rng_derive(0, 0))
    assert ds.dim == 2 and set(np.unique(ds.labels)) <= {0.0, 1.0}
    good = average_test_likelihood(ds, np.array([2.0, -1.0]))
    bad = average_test_likelihood(ds, np.array([-2.0, 1.0]))
    assert good > 0.6 > bad
    assert average_test_likelihood(ds, np.zeros(2)) == pytest.approx(0.5)


def test_build_model():
    assert isinstance(build_model("harmonic", n=2), Harmonic)
    dw = build_model("double_well", b=4)
    assert dw.b == 4.0 and dw.c == 0.5
    with pytest.raises(ParameterDomainError):
        build_model("quartic")
