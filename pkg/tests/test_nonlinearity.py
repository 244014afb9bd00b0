import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from dampwave.nonlinearity import (ZERO, NonlinearityError, check_dissipativeness, exponential,
                                   frechet_apply, jacobian, nemitski, polynomial, potential_integral,
                                   sample_fields_by_norm, verify_growth)
from dampwave.operator_core import DomainSpec, build_model, norm_H, random_fields
from dampwave.semiflow import lyapunov

IDENTITY = polynomial({1: 1.0}, mu=2.0, c=0.0)


def test_spec_invariants():
    with pytest.raises(ValueError):
        polynomial({1: 1.0}, alpha=1.5, beta_h=1.0)
    with pytest.raises(ValueError):
        polynomial({1: 1.0}, mu=-1.0, c=0.0)
    f = polynomial({1: 2.0, 3: -1.0})
    assert f.F(np.array(0.0)) == 0


def test_nemitski_zero(ref_model, ci):
    assert np.all(nemitski(ci, ref_model, np.zeros(64)) == 0)


def test_nemitski_first_mode_against_quadrature(ref_model, ci):
    out = nemitski(ci, ref_model, ref_model.mode(1))
    # independent oracle: continuous first eigenfunction, adaptive quadrature
    phi = lambda x: np.sqrt(2 / np.pi) * np.sin(x)
    oracle, _ = quad(lambda x: (2 * phi(x) - phi(x) ** 3) * phi(x), 0, np.pi, epsabs=1e-13)
    assert oracle == pytest.approx(2 - 3 / (2 * np.pi), abs=1e-12)
    assert abs(out[0] - oracle) < 1e-8
    # odd modes 3 is the only other nonzero coefficient
    assert np.all(np.abs(out[[1, 3, 4, 5]]) < 1e-10)


def test_linear_nemitski_is_identity(ref_model, rng):
    c = random_fields(ref_model, 3, rng)
    for row in c:
        np.testing.assert_allclose(nemitski(IDENTITY, ref_model, row), row, atol=1e-12)


def test_nonfinite_is_reported_with_location(ref_model):
    with pytest.raises(NonlinearityError) as err:
        nemitski(exponential(), ref_model, ref_model.mode(1, 2000.0))
    assert err.value.location is not None


def test_frechet_at_zero_and_zero_direction(ref_model, ci, rng):
    v = random_fields(ref_model, 1, rng)[0]
    np.testing.assert_allclose(frechet_apply(ci, ref_model, np.zeros(64), v), 2 * v, atol=1e-12)
    u = random_fields(ref_model, 1, rng)[0]
    assert np.all(frechet_apply(ci, ref_model, u, np.zeros(64)) == 0)


def test_frechet_matches_finite_differences(ref_model, ci, rng):
    u, v = random_fields(ref_model, 2, rng)
    d = frechet_apply(ci, ref_model, u, v)
    errs = []
    for h in (1e-3, 1e-4):
        fd = (nemitski(ci, ref_model, u + h * v) - nemitski(ci, ref_model, u)) / h
        errs.append(norm_H(ref_model, fd - d, 0))
    order = np.log10(errs[0] / errs[1])
    assert order >= 0.9
    J = jacobian(ci, ref_model, u)
    np.testing.assert_allclose(J @ v, d, atol=1e-10)
    np.testing.assert_allclose(J, J.T, atol=1e-12)


def test_growth_constants_finite(ref_model, ci, rng):
    samples = sample_fields_by_norm(ref_model, 200, rng, 4.0)
    rep = verify_growth(ci, ref_model, samples, rng)
    assert set(rep.constants) == {"n1", "n2", "n3", "n4", "n5"}
    assert all(np.isfinite(v) and v > 0 for v in rep.constants.values())
    assert rep.within_growth_form
    assert rep.C_tilde == max(rep.constants.values())
    # the derivative at zero is exactly 2 so n2 and n4 are attained there
    assert rep.constants["n2"] == pytest.approx(2.0, rel=1e-6)


def test_linear_growth_has_no_derivative_variation(ref_model, rng):
    samples = sample_fields_by_norm(ref_model, 50, rng, 4.0)
    rep = verify_growth(IDENTITY, ref_model, samples, rng)
    assert rep.constants["n3"] == 0 and rep.constants["n5"] == 0


def test_exponential_flagged(small_model, rng):
    samples = sample_fields_by_norm(small_model, 60, rng, 2.0)
    rep = verify_growth(exponential(), small_model, samples, rng)
    assert all(np.isfinite(v) for v in rep.constants.values())
    assert not rep.within_growth_form
    assert "outside the polynomial growth form" in rep.flags


def test_dissipativeness_reference_passes(ref_model, ci):
    rep = check_dissipativeness(ci, ref_model, 10.0)
    assert rep.passed and rep.violation is None
    assert rep.margin_flux == pytest.approx(1.0)


def test_dissipativeness_square_fails(ref_model):
    rep = check_dissipativeness(polynomial({2: 1.0}, mu=2.0, c=1.0), ref_model, 10.0)
    assert not rep.passed
    assert abs(rep.violation["u"]) == pytest.approx(10.0)
    assert rep.violation["margin"] < 0


def test_dissipativeness_zero_is_tight(ref_model):
    rep = check_dissipativeness(ZERO, ref_model, 5.0)
    assert rep.passed and rep.margin_flux == 0 and rep.margin_potential == 0


def test_dissipativeness_needs_pair(ref_model):
    with pytest.raises(ValueError):
        check_dissipativeness(polynomial({1: 1.0}), ref_model, 1.0)


def test_potential_zero_and_parseval(ref_model, rng):
    assert potential_integral(IDENTITY, ref_model, np.zeros(64)) == 0
    c = random_fields(ref_model, 4, rng)
    for row in c:
        val = potential_integral(IDENTITY, ref_model, row)
        assert val == pytest.approx(0.5 * np.sum(row**2), rel=1e-8)


def test_potential_of_projected_constant_converges():
    # the sine projection of a constant has an O(1/N) Gibbs defect in the integral
    f = polynomial({1: 2.0, 3: -1.0})
    errs = []
    for N in (64, 128):
        m = build_model(DomainSpec(1, (np.pi,), 1024, N))
        c = m.project(np.ones(1024))
        errs.append(abs(potential_integral(f, m, c) - 3 * np.pi / 4))
    assert errs[0] < 1.5 / 64 and errs[1] < 1.5 / 128
    assert errs[1] / errs[0] == pytest.approx(0.5, abs=0.05)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 4.0), st.integers(0, 2**31))
def test_lyapunov_bounded_below_on_bounded_sets(radius, seed):
    m = _model()
    f = polynomial({1: 2.0, 3: -1.0}, mu=4.0, c=1.0)
    r = np.random.default_rng(seed)
    u = sample_fields_by_norm(m, 4, r, radius)
    v = random_fields(m, 4, r) * radius
    # with F <= c the functional is bounded below by -integral(c)
    assert np.all(lyapunov(m, f, u, v, 1.0) >= -np.pi - 1e-9)


_CACHE = []


def _model():
    if not _CACHE:
        _CACHE.append(build_model(DomainSpec(1, (np.pi,), 128, 16)))
    return _CACHE[0]
