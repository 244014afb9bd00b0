import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from dampwave.operator_core import (CoefficientField, DomainSpec, OperatorError, assemble_operator,
                                    build_model, check_shift_inequalities, eig_decompose, norm_H,
                                    norm_H_theta, random_fields)


def test_domain_rejects_coarse_grid():
    with pytest.raises(ValueError):
        DomainSpec(1, (np.pi,), 10, 64)
    with pytest.raises(ValueError):
        DomainSpec(1, (-1.0,), 64, 4)


def test_reference_spectrum(ref_model):
    k = np.arange(1, 33)
    assert np.max(np.abs(ref_model.lam[:32] / k**2 - 1)) < 1e-4
    assert np.max(ref_model.residuals / np.maximum(ref_model.lam, 1)) < 1e-8
    assert ref_model.orthonormality_error() < 1e-10


def test_first_ritz_values():
    dom = DomainSpec(1, (np.pi,), 512, 4)
    A = assemble_operator(dom, CoefficientField.constant(dom))
    vals = np.sort(np.linalg.eigvalsh(A.toarray()))[:3]
    np.testing.assert_allclose(vals, [1, 4, 9], rtol=1e-4)


def test_potential_shift_moves_spectrum_by_one():
    dom = DomainSpec(1, (np.pi,), 256, 8)
    m0 = build_model(dom)
    m1 = build_model(dom, CoefficientField.constant(dom, 1.0, 1.0))
    np.testing.assert_allclose(m1.lam - m0.lam, 1.0, atol=1e-10)


def test_ellipticity_failure_names_the_point():
    dom = DomainSpec(1, (np.pi,), 64, 4)
    coeffs = CoefficientField.constant(dom)
    coeffs.a[17, 0, 0] = 0.1
    with pytest.raises(OperatorError) as err:
        assemble_operator(dom, coeffs, a0=0.5, a1=2.0)
    assert err.value.clause == "Hyp1(1)"
    assert err.value.location == (17,)


def test_single_mode_truncation():
    dom = DomainSpec(1, (np.pi,), 64, 1)
    m = build_model(dom)
    assert m.N == 1
    assert abs(norm_H(m, np.array([1.0]), 0) - 1) < 1e-12
    assert abs(m.integrate(m.to_grid(np.array([1.0])) ** 2) - 1) < 1e-10


def test_square_spectrum_multiplicities():
    dom = DomainSpec(2, (np.pi, np.pi), 40, 16)
    m = build_model(dom)
    expected = sorted(j * j + k * k for j in range(1, 6) for k in range(1, 6))[:16]
    np.testing.assert_allclose(m.lam, expected, rtol=5e-4)


def test_eig_decompose_sparse_path_matches_dense():
    dom = DomainSpec(2, (np.pi, np.pi), 52, 6)
    A = assemble_operator(dom, CoefficientField.constant(dom))
    m = eig_decompose(A, 6, dom)
    dense = np.sort(np.linalg.eigvalsh(A.toarray()))[:6]
    np.testing.assert_allclose(m.lam, dense, rtol=1e-9)


def test_single_mode_norms(ref_model):
    c = np.zeros(64)
    c[1] = 1.0
    lam2 = ref_model.lam[1]
    assert norm_H(ref_model, c, 1) == pytest.approx(np.sqrt(lam2))
    assert norm_H(ref_model, c, 1) == pytest.approx(2, rel=1e-9)
    assert norm_H(ref_model, c, 2) == pytest.approx(4, rel=1e-9)
    assert norm_H(ref_model, c, -1) == pytest.approx(0.5, rel=1e-9)
    assert norm_H(ref_model, np.zeros(64), 1.5) == 0


def test_shifted_norms_single_mode(ref_model):
    c = ref_model.mode(1)
    assert norm_H_theta(ref_model, c, 1, 3.0) == pytest.approx(2, rel=1e-10)
    assert norm_H_theta(ref_model, c, -1, 3.0) == pytest.approx(0.5, rel=1e-10)
    f = random_fields(ref_model, 5, np.random.default_rng(0))
    np.testing.assert_allclose(norm_H_theta(ref_model, f, 1, 0.0), norm_H(ref_model, f, 1))
    np.testing.assert_allclose(norm_H_theta(ref_model, f, -1, 0.0), norm_H(ref_model, f, -1))


def test_shift_inequalities_pass_and_tightest_is_first_mode(ref_model, rng):
    fields = np.vstack([random_fields(ref_model, 999, rng), ref_model.mode(1)])
    rep = check_shift_inequalities(ref_model, 3.0, fields)
    assert rep.passed and not rep.violations
    ratio, idx = rep.tightest["h1_shift_lower"]
    assert idx == 999 and ratio == pytest.approx(1.0, abs=1e-12)


def test_corrupted_lambda_is_reported(ref_model, rng):
    # overstate lambda1 only where the inequalities read it
    class Overstated(type(ref_model)):
        @property
        def lambda1(self):
            return 2.0

    bad = Overstated(*(getattr(ref_model, f) for f in ref_model.__dataclass_fields__))
    fields = np.vstack([random_fields(bad, 200, rng), bad.mode(1)])
    rep = check_shift_inequalities(bad, 3.0, fields)
    assert not rep.passed
    assert any(v["inequality"] == "h1_shift_poincare" and v["field"] == 200 for v in rep.violations)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=8, max_size=8), st.floats(0, 100))
def test_poincare_and_ladder_property(coeffs, theta):
    dom = DomainSpec(1, (np.pi,), 64, 8)
    m = _cached(dom)
    c = np.array(coeffs)
    assert norm_H(m, c, 1) ** 2 >= m.lambda1 * norm_H(m, c, 0) ** 2 * (1 - 1e-12)
    rep = check_shift_inequalities(m, theta, c[None])
    assert rep.passed


_MODELS = {}


def _cached(dom):
    if dom not in _MODELS:
        _MODELS[dom] = build_model(dom)
    return _MODELS[dom]


def test_cross_term_keeps_symmetry():
    dom = DomainSpec(2, (np.pi, np.pi), 24, 6)
    coeffs = CoefficientField.constant(dom, np.array([[1.0, 0.3], [0.3, 1.0]]))
    A = assemble_operator(dom, coeffs)
    assert abs(A - A.T).max() < 1e-12
    assert sp.issparse(A)
