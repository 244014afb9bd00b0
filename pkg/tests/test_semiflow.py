import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from dampwave.nonlinearity import ZERO, polynomial
from dampwave.operator_core import norm_H
from dampwave.semiflow import (StatePair, dissipation_check, integrate, linear_semigroup_step,
                               lyapunov, mild_step, mode_propagator, parabolic_integrate)


def _rk_oracle(s, eps, t, x0):
    B = np.array([[0.0, 1.0], [-s / eps, -1.0 / eps]])
    sol = solve_ivp(lambda _, x: B @ x, (0, t), x0, method="DOP853", rtol=1e-13, atol=1e-15)
    return sol.y[:, -1]


@pytest.mark.parametrize("s,eps", [
    (1.0, 1.0),               # complex roots
    (1.0, 0.1),               # distinct real roots
    (1.0, 0.25),              # double root
    (1.0 + 1e-9, 0.25),       # just across the boundary
    (1.0 - 1e-9, 0.25),
    (400.0, 0.01),
])
def test_mode_propagator_against_fine_integration(s, eps):
    P = mode_propagator(np.array([s]), eps, 1.0)[0]
    for x0 in ([1.0, 0.0], [0.0, 1.0]):
        np.testing.assert_allclose(P @ x0, _rk_oracle(s, eps, 1.0, x0), atol=1e-10)


def test_complex_regime_decays_at_half_rate():
    P = mode_propagator(np.array([1.0]), 1.0, 20.0)[0]
    assert np.linalg.norm(P, 2) < 3 * np.exp(-10.0)
    assert np.linalg.norm(P, 2) > 0.1 * np.exp(-10.0)


def test_linear_step_identity_and_semigroup(ref_model, rng):
    u, v = rng.standard_normal((2, 64))
    st0 = StatePair(u, v, 0.5)
    same = linear_semigroup_step(ref_model, st0, 2.0, 0.0)
    np.testing.assert_array_equal(same.u, u)
    a = linear_semigroup_step(ref_model, linear_semigroup_step(ref_model, st0, 2.0, 0.3), 2.0, 0.45)
    b = linear_semigroup_step(ref_model, st0, 2.0, 0.75)
    np.testing.assert_allclose(a.u, b.u, atol=1e-12)
    np.testing.assert_allclose(a.v, b.v, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.floats(1e-3, 1.0), st.floats(0.0, 300.0), st.floats(0.0, 2.0), st.floats(0.0, 2.0))
def test_semigroup_law_property(eps, s, t1, t2):
    stiff = np.array([s + 1e-3])
    lhs = mode_propagator(stiff, eps, t1)[0] @ mode_propagator(stiff, eps, t2)[0]
    rhs = mode_propagator(stiff, eps, t1 + t2)[0]
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * max(1.0, np.max(np.abs(rhs)) / eps)


def test_state_norms(ref_model):
    st0 = StatePair(ref_model.mode(2), ref_model.mode(1), 0.25)
    assert st0.norm(ref_model) == pytest.approx(2 + 0.5)
    assert st0.norm(ref_model, hilbert=True) == pytest.approx(np.sqrt(4.25))
    low = StatePair(ref_model.mode(2), ref_model.mode(2), 1.0, level=-1)
    assert low.norm(ref_model) == pytest.approx(1.5)
    with pytest.raises(ValueError):
        StatePair(np.zeros(3), np.zeros(4), 1.0)


def test_zero_forcing_mild_step_is_linear(ref_model, rng):
    st0 = StatePair(*rng.standard_normal((2, 64)), 0.5)
    a = mild_step(ref_model, st0, ZERO, 0.01)
    b = linear_semigroup_step(ref_model, st0, 0.0, 0.01)
    np.testing.assert_allclose(a.u, b.u, atol=1e-12)
    np.testing.assert_allclose(a.v, b.v, atol=1e-12)


def _positive(equilibria):
    return max(equilibria, key=lambda e: e[0])


def test_equilibrium_is_fixed(ref_model, ci, ref_equilibria):
    ustar = _positive(ref_equilibria)
    out = mild_step(ref_model, StatePair(ustar, np.zeros(64), 1.0), ci, 0.01)
    assert np.max(np.abs(out.u - ustar)) < 1e-8
    assert np.max(np.abs(out.v)) < 1e-8
    tr = integrate(ref_model, StatePair(ustar, np.zeros(64), 1.0), ci, 1.0, 0.01)
    assert np.max(np.abs(tr.u - ustar)) < 1e-8


def test_mild_step_second_order(ref_model, ci):
    init = StatePair(ref_model.mode(1, 0.8) + ref_model.mode(2, 0.5), np.zeros(64), 1.0)
    ref = integrate(ref_model, init, ci, 1.0, 0.02 / 64)
    errs = [np.linalg.norm(integrate(ref_model, init, ci, 1.0, h).u[-1] - ref.u[-1])
            for h in (0.02, 0.01, 0.005)]
    assert errs[0] / errs[1] > 3.5 and errs[1] / errs[2] > 3.5


def test_wave_converges_to_positive_equilibrium(ref_model, ci, ref_equilibria):
    tr = integrate(ref_model, StatePair(ref_model.mode(1, 0.1), np.zeros(64), 1.0), ci, 200.0, 0.01,
                   store_every=100)
    assert not tr.blown_up
    assert norm_H(ref_model, tr.v[-1], 0) <= 1e-6
    assert norm_H(ref_model, tr.u[-1] - _positive(ref_equilibria), 1) <= 1e-5
    assert tr.R(ref_model) == pytest.approx(np.max(tr.R_series(ref_model)))


def test_parabolic_pure_decay(ref_model, rng):
    u0 = rng.standard_normal(64) * np.arange(1, 65) ** -2.0
    tr = parabolic_integrate(ref_model, u0, ZERO, 1.0, 0.01)
    np.testing.assert_allclose(tr.u[-1], np.exp(-ref_model.lam) * u0, atol=1e-10)
    np.testing.assert_allclose(tr.v[-1], -ref_model.lam * tr.u[-1], atol=1e-10)


def test_parabolic_limit_shares_equilibrium(ref_model, ci, ref_equilibria):
    tr = parabolic_integrate(ref_model, ref_model.mode(1, 0.1), ci, 60.0, 0.01, store_every=100)
    assert norm_H(ref_model, tr.u[-1] - _positive(ref_equilibria), 0) <= 1e-6


def test_parabolic_second_order(ref_model, ci):
    u0 = ref_model.mode(1, 0.8) + ref_model.mode(3, 0.4)
    ref = parabolic_integrate(ref_model, u0, ci, 1.0, 0.02 / 64)
    errs = [np.linalg.norm(parabolic_integrate(ref_model, u0, ci, 1.0, h).u[-1] - ref.u[-1])
            for h in (0.02, 0.01, 0.005)]
    assert errs[0] / errs[1] > 3.5 and errs[1] / errs[2] > 3.5


def test_lyapunov_at_origin(ref_model, ci):
    assert lyapunov(ref_model, ci, np.zeros(64), np.zeros(64), 1.0) == 0


def test_dissipation_identity_richardson(ref_model, ci):
    init = StatePair(ref_model.mode(1, 0.1) + ref_model.mode(2, 0.3), np.zeros(64), 1.0)
    res = []
    for h in (4e-3, 2e-3, 1e-3):
        rep = dissipation_check(ref_model, ci, integrate(ref_model, init, ci, 20.0, h))
        assert rep.monotone
        res.append(rep.max_residual)
    assert res[-1] <= 5e-4
    assert res[0] / res[2] == pytest.approx(16, rel=0.15)


def test_omega_monotone_and_refinement(ref_model, ci):
    init = StatePair(ref_model.mode(1, 0.5), ref_model.mode(2, 0.5), 1.0)
    coarse = integrate(ref_model, init, ci, 5.0, 0.01)
    fine = integrate(ref_model, init, ci, 5.0, 0.005, store_every=2)
    eta_c, om_c = coarse.omega_table(ref_model)
    eta_f, om_f = fine.omega_table(ref_model)
    assert om_c[0] == 0 and np.all(np.diff(om_c) >= 0)
    np.testing.assert_allclose(eta_c, eta_f)
    assert np.all(om_f <= om_c + 1e-3)


def test_blow_up_is_flagged(ref_model):
    grow = polynomial({3: 1.0})
    tr = integrate(ref_model, StatePair(ref_model.mode(1, 5.0), np.zeros(64), 1.0), grow, 10.0, 0.01)
    assert tr.blown_up and tr.times[-1] < 10.0
