import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dampwave.attractor import (AttractorSample, equilibrium_residual, find_equilibria, gamma_map,
                                sample_attractor, sampling_density, semidistance, trend_correlation,
                                upper_semicontinuity_sweep)
from dampwave.nonlinearity import ZERO, polynomial
from dampwave.operator_core import norm_H
from dampwave.semiflow import parabolic_integrate

STABLE = polynomial({1: -1.0}, mu=2.0, c=0.0)


def _point(model, u, v=None, eps=1.0):
    u = np.atleast_2d(u)
    v = np.zeros_like(u) if v is None else np.atleast_2d(v)
    return AttractorSample(eps, u, v, ["test"] * len(u), 0.0)


def test_three_equilibria_from_five_seeds(ref_model, ci):
    seeds = [np.zeros(64)] + [ref_model.mode(1, a) for a in (0.5, -0.5, 1.5, -1.5)]
    eqs = find_equilibria(ref_model, ci, seeds)
    assert len(eqs) == 3
    assert all(equilibrium_residual(ref_model, ci, e) <= 1e-10 for e in eqs)
    np.testing.assert_allclose(eqs[1], -eqs[2], atol=1e-10)
    assert norm_H(ref_model, eqs[0], 1) == 0


def test_default_seeds_find_the_same_three(ref_equilibria):
    assert len(ref_equilibria) == 3


@pytest.mark.parametrize("f", [ZERO, STABLE], ids=["zero", "stable-linear"])
def test_trivial_equilibrium_sets(ref_model, f):
    eqs = find_equilibria(ref_model, f)
    assert len(eqs) == 1 and np.max(np.abs(eqs[0])) < 1e-12


def test_reference_sample_structure(small_model, ci):
    s = sample_attractor(small_model, ci, 1.0, T_transient=20.0, T_sample=4.0, h=0.02)
    assert s.R <= 4.0
    eqs = [p for p in s.provenance if p.startswith("equilibrium")]
    assert len(eqs) == 3
    assert any(p.startswith("manifold:0") for p in s.provenance)


def test_stable_linear_sample_is_origin(small_model):
    s = sample_attractor(small_model, STABLE, 1.0, T_transient=40.0, T_sample=2.0, h=0.02)
    assert np.max(norm_H(small_model, s.u, 1)) < 1e-6
    assert np.max(norm_H(small_model, s.v, 0)) < 1e-6


def test_parabolic_sample_uses_time_derivative(small_model, ci):
    s = sample_attractor(small_model, ci, 0.0, T_transient=10.0, T_sample=2.0, h=0.02)
    np.testing.assert_allclose(s.v, gamma_map(small_model, ci, s.u)["v_time_derivative"], atol=1e-12)


def test_gamma_at_zero_and_equilibrium(ref_model, ci, ref_equilibria):
    g = gamma_map(ref_model, ci, np.zeros(64))
    assert np.all(g["v_displayed"] == 0) and np.all(g["v_time_derivative"] == 0)
    ustar = ref_equilibria[1]
    g = gamma_map(ref_model, ci, ustar)
    from dampwave.nonlinearity import nemitski
    fu = nemitski(ci, ref_model, ustar)
    assert np.max(np.abs(g["v_time_derivative"])) < 1e-10
    np.testing.assert_allclose(g["v_displayed"], 2 * fu, atol=1e-10)
    assert g["discrepancy"] > 1


def test_gamma_matches_parabolic_finite_difference(ref_model, ci):
    tr = parabolic_integrate(ref_model, ref_model.mode(1, 0.3) + ref_model.mode(2, 0.2), ci, 1.0, 1e-3)
    fd = (tr.u[1:] - tr.u[:-1]) / 1e-3
    v = gamma_map(ref_model, ci, tr.u[:-1])["v_time_derivative"]
    err = np.max(norm_H(ref_model, fd - v, 0))
    assert err < 5e-2
    tr2 = parabolic_integrate(ref_model, tr.u[0], ci, 1.0, 5e-4)
    fd2 = (tr2.u[1:] - tr2.u[:-1]) / 5e-4
    err2 = np.max(norm_H(ref_model, fd2 - gamma_map(ref_model, ci, tr2.u[:-1])["v_time_derivative"], 0))
    assert err2 / err == pytest.approx(0.5, abs=0.1)


def test_semidistance_examples(ref_model):
    base = _point(ref_model, ref_model.mode(1))
    assert semidistance(ref_model, base, base) == 0
    for t in (0.1, 0.7):
        shifted = _point(ref_model, ref_model.mode(1) + ref_model.mode(2, t))
        assert semidistance(ref_model, shifted, base, "L2") == pytest.approx(2 * t, rel=1e-9)
        assert semidistance(ref_model, shifted, base, "Hm1") == pytest.approx(2 * t, rel=1e-9)


def test_semidistance_asymmetry(ref_model, rng):
    pts = rng.standard_normal((10, 64))
    sup = _point(ref_model, pts)
    sub = _point(ref_model, pts[:4])
    assert semidistance(ref_model, sub, sup) == 0
    assert semidistance(ref_model, sup, sub) > 0
    with pytest.raises(ValueError):
        semidistance(ref_model, _point(ref_model, np.zeros((0, 64))), sup)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 12), st.integers(1, 12))
def test_norm_domination(seed, na, nb):
    from dampwave.operator_core import DomainSpec, build_model
    m = _small(DomainSpec, build_model)
    r = np.random.default_rng(seed)
    A = _point(m, r.standard_normal((na, 16)), r.standard_normal((na, 16)))
    B = _point(m, r.standard_normal((nb, 16)), r.standard_normal((nb, 16)))
    factor = max(1.0, m.lambda1**-0.5)
    assert semidistance(m, A, B, "Hm1") <= factor * semidistance(m, A, B, "L2") + 1e-12


_M = []


def _small(DomainSpec, build_model):
    if not _M:
        _M.append(build_model(DomainSpec(1, (np.pi,), 128, 16)))
    return _M[0]


def test_density_of_a_line(ref_model):
    pts = np.outer(np.linspace(0, 1, 11), ref_model.mode(1))
    assert sampling_density(ref_model, _point(ref_model, pts)) == pytest.approx(0.1, rel=1e-9)
    assert sampling_density(ref_model, _point(ref_model, pts[:1])) == 0


def test_trend_correlation():
    assert trend_correlation([1, 0.5, 0.25], [3, 2, 1]) == pytest.approx(-1)
    assert trend_correlation([0.25, 1, 0.5], [1, 3, 2]) == pytest.approx(-1)
    assert trend_correlation([1, 0.5, 0.25], [1, 2, 3]) == pytest.approx(1)
    assert trend_correlation([1, 0.5], [0, 0]) == -1.0


def test_stable_linear_sweep_is_zero(small_model):
    curve = upper_semicontinuity_sweep(small_model, STABLE, [1.0, 0.5], tolerance=1e-6,
                                       T_transient=40.0, T_sample=1.0, h=0.02)
    assert max(curve.d_L2) < 1e-6 and max(curve.d_Hm1) < 1e-6
    assert curve.passed


def test_small_reference_sweep_shape(small_model, ci):
    curve = upper_semicontinuity_sweep(small_model, ci, [1.0, 0.5, 0.25], T_transient=20.0,
                                       T_sample=3.0, h=0.02, robustness_check=True)
    assert curve.dominated
    assert curve.d_L2[0] > curve.d_L2[-1]
    assert len(curve.robustness) == 3
    assert set(curve.samples) == {0.0, 1.0, 0.5, 0.25}
