"""Nonlinearities f(x, u), their Nemitski operators and structural checks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .operator_core import SpectralModel, norm_H

log = logging.getLogger(__name__)


class NonlinearityError(ArithmeticError):
    def __init__(self, message, location=None):
        super().__init__(message)
        self.location = location


@dataclass(frozen=True, eq=False)
class NonlinearitySpec:
    """Pointwise f, its first two u-derivatives and its primitive F.

    Each evaluator takes ``u`` with the grid as trailing axis. Spatially
    varying coefficients are grid arrays broadcast against ``u``.
    ``powers`` holds the polynomial coefficients when the family is
    polynomial; it is ``None`` for other declared families.
    """

    f: Callable
    df: Callable
    d2f: Callable
    F: Callable
    powers: dict | None = None
    name: str = "custom"
    mu: float | None = None
    c: np.ndarray | float | None = None
    alpha: float = 1.0
    beta_h: float = 1.0
    C_holder: float | None = None
    C_lip2: float | None = None
    notes: list = field(default_factory=list)

    def __post_init__(self):
        if not np.isclose(self.alpha + self.beta_h, 2.0):
            raise ValueError("Hoelder pair must satisfy alpha + beta_h = 2")
        if not (1 <= self.alpha < 2 and 0 < self.beta_h <= 1):
            raise ValueError("need 1 <= alpha < 2 and 0 < beta_h <= 1")
        if self.mu is not None and self.mu <= 0:
            raise ValueError("mu must be positive")

    @property
    def is_zero(self) -> bool:
        return self.powers is not None and all(np.all(np.asarray(a) == 0) for a in self.powers.values())

    @property
    def within_growth_form(self) -> bool:
        """True for polynomials of degree <= 3 (the admissible critical growth)."""
        return self.powers is not None and max(self.powers, default=0) <= 3

    def sup_coeff(self, p: int) -> float:
        return float(np.max(np.abs(self.powers.get(p, 0.0))))


def polynomial(coeffs: dict, mu=None, c=None, alpha=1.0, beta_h=1.0, name=None) -> NonlinearitySpec:
    """f(x,u) = sum_p coeffs[p](x) u^p with constant or grid-valued coefficients."""
    powers = {int(p): (a if np.ndim(a) == 0 else np.asarray(a, float).ravel())
              for p, a in coeffs.items()}
    ps = sorted(powers)

    def horner(cs, u):
        # cs maps power -> coefficient; plain multiplication beats np.power here
        out = 0.0 * u
        for q in range(max(cs, default=0), -1, -1):
            out = out * u
            if q in cs:
                out = out + cs[q]
        return out

    def f(u):
        return horner(powers, u)

    def df(u):
        return horner({p - 1: p * powers[p] for p in ps if p >= 1}, u)

    def d2f(u):
        return horner({p - 2: p * (p - 1) * powers[p] for p in ps if p >= 2}, u)

    def F(u):
        return horner({p + 1: powers[p] / (p + 1) for p in ps}, u)

    sup = {p: float(np.max(np.abs(powers[p]))) for p in ps}
    C_holder = sum(p * sup[p] for p in ps if p >= 2) or 1.0
    C_lip2 = 6.0 * sup.get(3, 0.0) if max(ps, default=0) <= 3 else None
    label = name or " + ".join(f"{_fmt(powers[p])}u^{p}" for p in ps) or "0"
    return NonlinearitySpec(f, df, d2f, F, powers, label, mu, c, alpha, beta_h, C_holder, C_lip2)


def _fmt(a):
    return f"{float(a):g}" if np.ndim(a) == 0 else "a(x)"


def exponential(mu=None, c=None) -> NonlinearitySpec:
    out = NonlinearitySpec(
        np.exp, np.exp, np.exp, lambda u: np.exp(u) - 1.0,
        powers=None, name="exp(u)", mu=mu, c=c,
    )
    out.notes.append("outside the polynomial growth form")
    return out


ZERO = polynomial({}, mu=1.0, c=0.0, name="0")


# -- Nemitski operators ----------------------------------------------------

def _checked(values, model: SpectralModel):
    if not np.all(np.isfinite(values)):
        idx = np.argwhere(~np.isfinite(np.atleast_2d(values)))[0]
        loc = [float(x.ravel()[idx[-1]]) for x in model.points]
        raise NonlinearityError(f"non-finite nonlinearity value at grid point {loc}", location=loc)
    return values


def nemitski(f: NonlinearitySpec, model: SpectralModel, c) -> np.ndarray:
    u = model.to_grid(c)
    with np.errstate(over="ignore", invalid="ignore"):
        g = f.f(u)
    return model.project(_checked(g, model))


def frechet_apply(f: NonlinearitySpec, model: SpectralModel, c, v) -> np.ndarray:
    u = model.to_grid(c)
    with np.errstate(over="ignore", invalid="ignore"):
        g = f.df(u) * model.to_grid(v)
    return model.project(_checked(g, model))


def jacobian(f: NonlinearitySpec, model: SpectralModel, c) -> np.ndarray:
    """Galerkin matrix of multiplication by d_u f(x, u(x)); symmetric (N, N)."""
    d = f.df(model.to_grid(c))
    d = _checked(np.broadcast_to(d, model.phi.shape[:1]), model)
    return model.cell_volume * (model.phi.T * d) @ model.phi


def cubic_form(f: NonlinearitySpec, model: SpectralModel, c, v) -> np.ndarray:
    """Integral of d_uu f(x, u) v^3 over the domain."""
    return model.integrate(f.d2f(model.to_grid(c)) * model.to_grid(v) ** 3)


def quadratic_form(f: NonlinearitySpec, model: SpectralModel, c, v) -> np.ndarray:
    """Integral of d_u f(x, u) v^2 over the domain."""
    return model.integrate(f.df(model.to_grid(c)) * model.to_grid(v) ** 2)


def potential_integral(f: NonlinearitySpec, model: SpectralModel, c) -> np.ndarray:
    return model.integrate(f.F(model.to_grid(c)))


# -- constants feeding the certificate chain --------------------------------

def linf_embedding_constant(model: SpectralModel) -> float:
    """Constant c with sup|u|^2 <= c ||u||_{H^1_0}^2 on the retained span.

    1D uses |u(x)|^2 <= x(L-x)/L ||u'||^2, rounded up to 1; 2D has no
    Sobolev embedding into L^inf, so the truncation-exact Cauchy-Schwarz
    constant sum_k sup|phi_k|^2 / lambda_k is used instead.
    """
    lam1 = model.lambda1
    if model.domain.dimension == 1:
        L = model.domain.lengths[0]
        slack = 1.0 + max(0.0, -model.beta_min) / lam1
        return max(1.0, L * slack / (4.0 * model.a0))
    sup2 = np.max(model.phi**2, axis=0)
    return float(np.sum(sup2 / model.lam))


def derivative_bound(f: NonlinearitySpec, model: SpectralModel, R: float, order: int = 1) -> float:
    """Upper bound for sup|d^order_u f(x, u)| over fields with ||u||_{H^1_0}^2 <= R."""
    m2 = linf_embedding_constant(model) * R
    if f.powers is not None:
        total = 0.0
        for p in f.powers:
            if p < order:
                continue
            fac = np.prod(range(p - order + 1, p + 1))
            total += fac * f.sup_coeff(p) * m2 ** ((p - order) / 2)
        return float(total)
    us = np.linspace(-np.sqrt(m2), np.sqrt(m2), 2001)
    ev = f.df if order == 1 else f.d2f
    return float(np.max(np.abs(ev(us))))


# -- growth estimates ------------------------------------------------------

@dataclass
class GrowthReport:
    constants: dict
    samples: int
    worst_index: dict
    within_growth_form: bool
    growth_flags: list
    flags: list

    @property
    def C_tilde(self) -> float:
        return max(self.constants.values())

    def to_dict(self) -> dict:
        return {
            "C_tilde": self.C_tilde,
            "constants": self.constants,
            "samples": self.samples,
            "worst_index": self.worst_index,
            "within_growth_form": self.within_growth_form,
            "growth_flags": self.growth_flags,
            "flags": self.flags,
        }


def sample_fields_by_norm(model: SpectralModel, count: int, rng: np.random.Generator,
                          max_norm: float = 4.0) -> np.ndarray:
    k = np.arange(1, model.N + 1)
    raw = rng.standard_normal((count, model.N)) * k**-1.5
    raw /= norm_H(model, raw, 1)[:, None]
    return raw * np.linspace(0.0, max_norm, count)[:, None]


def verify_growth(f: NonlinearitySpec, model: SpectralModel, samples: np.ndarray,
                  rng: np.random.Generator, pair_scale: float = 0.3) -> GrowthReport:
    """Empirical suprema of the five Nemitski growth ratios.

    The Lipschitz-type ratios use pairs (u, u + d) with random perturbations d
    whose H^1_0 norm is ``pair_scale`` times a uniform draw.
    """
    lam = model.lam
    s_half = lam**-0.5
    a, b = f.alpha, f.beta_h
    nrm = norm_H(model, samples, 1)

    pert = rng.standard_normal(samples.shape) * np.arange(1, model.N + 1) ** -1.5
    pert *= (pair_scale * rng.uniform(0.01, 1.0, len(samples)) / norm_H(model, pert, 1))[:, None]
    partners = samples + pert
    nrm2 = norm_H(model, partners, 1)
    dist = norm_H(model, pert, 1)

    ratios = {k: np.zeros(len(samples)) for k in ("n1", "n2", "n3", "n4", "n5")}
    for i, (u1, u2) in enumerate(zip(samples, partners)):
        fu = nemitski(f, model, u1)
        ratios["n1"][i] = norm_H(model, fu, 0) / (1 + nrm[i] ** 3)
        J1 = jacobian(f, model, u1)
        J2 = jacobian(f, model, u2)
        ratios["n2"][i] = np.linalg.norm(J1 * s_half, 2) / (1 + nrm[i] ** 2)
        ratios["n4"][i] = np.linalg.norm(s_half[:, None] * J1, 2) / (1 + nrm[i] ** 2)
        denom = (1 + nrm[i] ** a + nrm2[i] ** a) * dist[i] ** b
        dJ = J1 - J2
        ratios["n3"][i] = np.linalg.norm(dJ * s_half, 2) / denom
        ratios["n5"][i] = np.linalg.norm(s_half[:, None] * dJ, 2) / denom

    constants = {k: float(np.max(r)) for k, r in ratios.items()}
    worst = {k: int(np.argmax(r)) for k, r in ratios.items()}
    growth_flags = []
    order = np.argsort(nrm)
    thirds = np.array_split(order, 3)
    for k, r in ratios.items():
        mid, top = np.max(r[thirds[1]]), np.max(r[thirds[2]])
        if mid > 0 and top > 2.0 * mid:
            growth_flags.append(k)
    flags = list(f.notes)
    if not f.within_growth_form and "outside the polynomial growth form" not in flags:
        flags.append("outside the polynomial growth form")
    if growth_flags:
        flags.append("ratio growth across scales: " + ",".join(growth_flags))
    return GrowthReport(constants, len(samples), worst, f.within_growth_form, growth_flags, flags)


# -- dissipativeness -------------------------------------------------------

@dataclass
class DissipativenessReport:
    passed: bool
    margin_flux: float
    margin_potential: float
    violation: dict | None
    u_max: float


def check_dissipativeness(f: NonlinearitySpec, model: SpectralModel, u_max: float,
                          n_levels: int = 801) -> DissipativenessReport:
    """Check f u - mu F <= c and F <= c on the grid x [-u_max, u_max] lattice."""
    if f.mu is None or f.c is None:
        raise ValueError("dissipativeness needs declared mu and c")
    us = np.linspace(-u_max, u_max, n_levels)[:, None]
    c = np.broadcast_to(np.asarray(f.c, float).ravel(), model.phi.shape[:1])
    flux = f.f(us) * us - f.mu * f.F(us)
    pot = f.F(us)
    m1 = c - np.broadcast_to(flux, (n_levels, c.size))
    m2 = c - np.broadcast_to(pot, (n_levels, c.size))
    violation = None
    for name, m in (("f*u - mu*F <= c", m1), ("F <= c", m2)):
        if m.min() < 0:
            iu, ix = np.unravel_index(np.argmin(m), m.shape)
            violation = {
                "inequality": name,
                "x": [float(p.ravel()[ix]) for p in model.points],
                "u": float(us[iu, 0]),
                "margin": float(m[iu, ix]),
            }
            break
    return DissipativenessReport(violation is None, float(m1.min()), float(m2.min()), violation, u_max)
