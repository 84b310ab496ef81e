import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adlkit.core import DynamicsParams, Form, RawParams, SamplerState, normalize_params, rng_derive
from adlkit.errors import ConfigError, DivergenceError, ParameterDomainError
from adlkit.estimators import replica_ensemble, variance_estimate
from adlkit.integrators import (
    BADODAB,
    ODABADO,
    Propagator,
    StepConfig,
    badodab_step,
    make_stepper,
    odabado_step,
    ou_coefficients,
    simulate,
)
from adlkit.potentials import BlrPosterior, Dataset, DoubleWell, Harmonic, MinibatchGradient


def test_ou_zero_friction():
    a, g = ou_coefficients(0.0, 1.7, 0.3)
    assert a == 1.0 and g == pytest.approx(1.7 * math.sqrt(0.3), rel=1e-15)


def test_ou_examples():
    a, g = ou_coefficients(1.0, math.sqrt(2.0), 0.5)
    # sqrt(1 - e^-1) = 0.7950600...
    assert a == pytest.approx(0.606531, abs=1e-6) and g == pytest.approx(0.795060, abs=1e-6)
    a, g = ou_coefficients(-1.0, 1.0, 0.1)
    assert a == pytest.approx(1.105171, abs=1e-6) and g == pytest.approx(0.332719, abs=1e-6)


@given(zeta=st.floats(1e-6, 50.0), sigma=st.floats(0.01, 10.0), dt=st.floats(1e-4, 1.0))
def test_ou_fluctuation_dissipation(zeta, sigma, dt):
    a, g = ou_coefficients(zeta, sigma, dt)
    assert a * a + 2 * zeta * g * g / sigma**2 == pytest.approx(1.0, abs=1e-14)
    assert g >= 0


@given(zeta=st.floats(-1e-3, 1e-3), dt=st.floats(1e-3, 1.0))
def test_ou_series_branch_continuous(zeta, dt):
    # compare against high-precision evaluation of (1 - e^{-2 dt zeta}) / (2 zeta)
    import mpmath

    _, g = ou_coefficients(zeta, 1.0, dt)
    with mpmath.workdps(60):
        if zeta == 0:
            ref = mpmath.mpf(dt)
        else:
            z = mpmath.mpf(zeta)
            ref = -mpmath.expm1(-2 * mpmath.mpf(dt) * z) / (2 * z)
    assert g * g == pytest.approx(float(ref), rel=1e-13)


def test_ou_vectorized():
    a, g = ou_coefficients(np.array([0.0, 1.0, -1.0]), 1.0, 0.1)
    assert a.shape == (3,) and g.shape == (3,)


def _state(q, p, f, form=Form.NORMALIZED):
    return SamplerState([q], [p], f, form)


def test_badodab_zero_dt_identity():
    s = _state(0.3, -0.2, 0.5)
    out = badodab_step(s, DynamicsParams(1, 1, 1), Harmonic(), 0.0, rng_derive(0, 0))
    assert out is s or (np.array_equal(out.q, s.q) and out.friction == s.friction)


def test_odabado_zero_dt_identity():
    prm = normalize_params(1, 1, 1, 0)
    s = _state(0.3, -0.2, 0.5, Form.RAW)
    out = odabado_step(s, prm, Harmonic(), 0.0, rng_derive(0, 0))
    assert np.array_equal(out.p, s.p) and out.friction == s.friction


def test_badodab_hand_execution():
    # from rest at the minimum only the two thermostat half steps act
    st_ = BADODAB(DynamicsParams(1.0, 1.0, 1.0), Harmonic())
    dt = 0.01
    q, p, xi, _ = st_.step(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros(1), dt, np.zeros((1, 1, 1)))
    assert q[0, 0] == 0.0 and p[0, 0] == 0.0
    assert xi[0] == pytest.approx(-dt, rel=1e-15)


def test_badodab_stage_order_by_hand():
    prm = DynamicsParams(2.0, 0.7, 1.3)
    model = DoubleWell(1.0, 1.0, 0.5)
    q0, p0, x0, dt, r = 0.4, -0.9, 0.25, 0.05, 0.8
    st_ = BADODAB(prm, model)
    q, p, xi, _ = st_.step(np.array([[q0]]), np.array([[p0]]), np.array([x0]), dt, np.array([[[r]]]))
    g = lambda x: float(model.gradient([x])[0])
    h = dt / 2
    P = p0 - h * g(q0)
    Q = q0 + h * P
    X = x0 + h / prm.epsilon * (P * P - 1 / prm.beta)
    z = X / prm.epsilon + prm.gamma
    s = math.sqrt(2 * prm.gamma / prm.beta)
    P = math.exp(-dt * z) * P + s * math.sqrt((1 - math.exp(-2 * dt * z)) / (2 * z)) * r
    X = X + h / prm.epsilon * (P * P - 1 / prm.beta)
    Q = Q + h * P
    P = P - h * g(Q)
    assert q[0, 0] == pytest.approx(Q, rel=1e-14)
    assert p[0, 0] == pytest.approx(P, rel=1e-14)
    assert xi[0] == pytest.approx(X, rel=1e-14)


def test_odabado_stage_order_by_hand():
    prm = normalize_params(1.0, 2.0, 0.8, 0.3)
    model = DoubleWell(1.0, 1.0, 0.5)
    q0, p0, z0, dt, r1, r2 = -0.3, 0.6, 0.1, 0.04, 0.5, -1.1
    st_ = ODABADO(prm, model)
    q, p, zeta, _ = st_.step(np.array([[q0]]), np.array([[p0]]), np.array([z0]), dt,
                             np.array([[[r1], [r2]]]))
    g = lambda x: float(model.gradient([x])[0])
    h, nu, sA = dt / 2, prm.raw.nu, prm.raw.sigma_A

    def ou(P, Z, R):
        return math.exp(-h * Z) * P + sA * math.sqrt((1 - math.exp(-2 * h * Z)) / (2 * Z)) * R

    P = ou(p0, z0, r1)
    Z = z0 + h / nu * (P * P - 1)
    Q = q0 + h * P
    P = P - dt * g(Q)
    Q = Q + h * P
    Z = Z + h / nu * (P * P - 1)
    P = ou(P, Z, r2)  # final OU acts on the kicked momentum
    assert q[0, 0] == pytest.approx(Q, rel=1e-14)
    assert p[0, 0] == pytest.approx(P, rel=1e-14)
    assert zeta[0] == pytest.approx(Z, rel=1e-14)


def test_form_checks():
    with pytest.raises(ConfigError):
        badodab_step(_state(0, 0, 0, Form.RAW), DynamicsParams(1, 1, 1), Harmonic(), 0.1, rng_derive(0, 0))
    with pytest.raises(ConfigError):
        ODABADO(DynamicsParams(1, 1, 1), Harmonic())
    with pytest.raises(ConfigError):
        make_stepper("baoab", DynamicsParams(1, 1, 1), Harmonic())


def test_time_reversibility_of_deterministic_core():
    prm = DynamicsParams(1.0, 1e-300, 0.8)
    st_ = BADODAB(prm, DoubleWell(1.0, 1.0, 0.5))
    zero = np.zeros((1, 1, 1))
    q0, p0, x0 = np.array([[0.3]]), np.array([[1.1]]), np.array([0.4])
    q, p, x = q0, p0, x0
    for _ in range(50):
        q, p, x, _ = st_.step(q, p, x, 0.01, zero)
    q, p, x = q, -p, -x
    for _ in range(50):
        q, p, x, _ = st_.step(q, p, x, 0.01, zero)
    assert np.allclose(q, q0, atol=1e-10) and np.allclose(-p, p0, atol=1e-10) and np.allclose(-x, x0, atol=1e-10)


def test_velocity_verlet_limit_energy_bounded():
    # gamma -> 0 and epsilon -> infinity freeze the thermostat at xi = 0
    prm = DynamicsParams(1.0, 1e-300, 1e12)
    st_ = BADODAB(prm, Harmonic())
    zero = np.zeros((1, 1, 1))
    q, p, x = np.array([[1.0]]), np.array([[0.0]]), np.zeros(1)
    e0 = 0.5
    worst = 0.0
    cache = None
    for _ in range(100_000):
        q, p, x, cache = st_.step(q, p, x, 0.01, zero, cache)
        worst = max(worst, abs(0.5 * (q[0, 0] ** 2 + p[0, 0] ** 2) - e0))
    assert worst < 1e-4


def test_step_config_validation():
    with pytest.raises(ParameterDomainError):
        StepConfig(0.0, 10)
    with pytest.raises(ParameterDomainError):
        StepConfig(0.1, -1)
    with pytest.raises(ParameterDomainError):
        StepConfig(0.1, 10, thinning=0)


def test_simulate_rows_and_determinism():
    prm = DynamicsParams(1, 1, 1)
    init = _state(0.5, 0.0, 0.0)
    stp = BADODAB(prm, Harmonic())
    s0 = simulate(init, stp, StepConfig(0.01, 0), ["q"], rng_derive(1, 0))
    assert s0.values.shape == (1, 1) and s0.values[0, 0] == 0.5
    a = simulate(init, stp, StepConfig(0.01, 103, thinning=10), ["q", "p2", "1"], rng_derive(1, 0))
    b = simulate(init, stp, StepConfig(0.01, 103, thinning=10), ["q", "p2", "1"], rng_derive(1, 0))
    assert a.values.shape == (11, 3)
    assert np.array_equal(a.values, b.values)
    assert np.all(a.column("1") == 1.0)
    assert np.allclose(a.times, np.arange(11) * 0.1)


def test_simulate_matches_repeated_single_steps():
    prm = DynamicsParams(1, 1, 1)
    stp = BADODAB(prm, DoubleWell())
    init = _state(0.2, 0.1, -0.3)
    series = simulate(init, stp, StepConfig(0.02, 5), ["q"], rng_derive(5, 3))
    # one stream consumed step by step gives the same path
    s = init
    rng = rng_derive(5, 3)
    for k in range(5):
        s = badodab_step(s, prm, DoubleWell(), 0.02, rng)
    assert s.q[0] == pytest.approx(series.values[-1, 0], rel=1e-14)


def test_divergence_raises_with_state():
    prm = DynamicsParams(1, 1, 1)
    stp = BADODAB(prm, DoubleWell(1.0, 1.0, 0.5))
    init = _state(50.0, 0.0, 0.0)
    with pytest.raises(DivergenceError) as info:
        simulate(init, stp, StepConfig(0.5, 100), ["q"], rng_derive(0, 0))
    assert info.value.step >= 1
    assert info.value.last_state is not None and np.all(np.isfinite(info.value.last_state.q))


def test_propagator_excludes_diverged_replica():
    prm = DynamicsParams(1, 1, 1)
    stp = BADODAB(prm, DoubleWell())
    init = SamplerState(np.array([[0.1], [50.0]]), np.zeros((2, 1)), np.zeros(2))
    prop = Propagator(stp, init, [rng_derive(0, 0), rng_derive(0, 1)], 0.5)
    for _ in range(20):
        prop.advance()
    assert list(prop.excluded) == [False, True]


def test_badodab_invariant_moments():
    # 10^6 replica-steps; the acceptance suite runs the full 10^7
    res = replica_ensemble(Harmonic(), DynamicsParams(1, 1, 1), 200, StepConfig(2e-3, 5000),
                           ["q2", "p2", "xi2", "xi"], seed=21)
    for name, target in (("q2", 1.0), ("p2", 1.0), ("xi2", 1.0), ("xi", 0.0)):
        est = variance_estimate(res, name)
        assert abs(est.empirical_mean - target) < 4 * est.mean_se, name


def test_odabado_no_applied_noise_preserves_kinetic_energy():
    # sigma_A = 0 with exact gradients: the Nose-Hoover feedback alone fixes E[p^2]
    prm = DynamicsParams(1.0, 0.5, 1.0, raw=RawParams(1.0, 0.0, 1.0))
    res = replica_ensemble(Harmonic(), prm, 200, StepConfig(0.02, 20_000), ["p2"], seed=3,
                           integrator="odabado", init="fixed", q0=[1.0])
    est = variance_estimate(res, "p2")
    assert abs(est.empirical_mean - 1.0) < 4 * est.mean_se + 2e-3


def test_odabado_minibatch_friction_positive():
    x = np.array([[1.0, 0.5], [-0.8, 1.2], [0.3, -1.5]])
    ds = Dataset(x, np.array([1.0, 0.0, 1.0]))
    model = BlrPosterior(ds, 100.0)
    prm = DynamicsParams(1.0, 0.5, 1.0, raw=RawParams(1.0, 0.0, 1.0))
    grad = MinibatchGradient(model, 1)
    res = replica_ensemble(model, prm, 8, StepConfig(0.05, 20_000), ["zeta"], seed=4,
                           integrator="odabado", gradient=grad, init="fixed", q0=[0.0, 0.0])
    assert variance_estimate(res, "zeta").empirical_mean > 0
