"""Mild solutions of the damped wave equation and its parabolic limit.

All time stepping is exact on the linear part: each retained mode carries a
closed-form 2x2 exponential, and the nonlinearity enters through a Duhamel
integral with linear interpolation of f along the step (an implicit
exponential trapezoidal rule, order 2, exact for constant forcing).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .nonlinearity import NonlinearitySpec, nemitski, potential_integral
from .operator_core import SpectralModel, norm_H

log = logging.getLogger(__name__)

BLOWUP_CEILING = 1e6
DEGENERATE_BAND = 1e-8
MAX_HALVINGS = 8


class IntegrationError(RuntimeError):
    pass


@dataclass
class StatePair:
    u: np.ndarray
    v: np.ndarray
    eps: float
    level: int = 0

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        if self.u.shape != self.v.shape:
            raise ValueError("u and v must share one spectral model")

    def norm(self, model: SpectralModel, theta: float = 0.0, hilbert: bool = False):
        """Weighted norm in Z_{eps,level}[theta] (level 0 or -1).

        ``hilbert=True`` returns the square root of the sum of squares,
        the Hilbert norm used for operator norms and energy sandwiches.
        """
        lam = model.lam + theta
        if self.level == 0:
            a = np.sqrt(np.sum(lam * self.u**2, axis=-1))
            b = np.sqrt(np.sum(self.v**2, axis=-1))
        elif self.level == -1:
            a = np.sqrt(np.sum(self.u**2, axis=-1))
            b = np.sqrt(np.sum(self.v**2 / lam, axis=-1))
        else:
            raise ValueError("weighted norms defined for levels 0 and -1")
        b = np.sqrt(self.eps) * b
        return np.sqrt(a**2 + b**2) if hilbert else a + b


# -- per-mode linear flow ---------------------------------------------------

def mode_propagator(stiffness, eps: float, t: float) -> np.ndarray:
    """exp(t B) for B = [[0, 1], [-s/eps, -1/eps]], one 2x2 block per stiffness s.

    Uses the characteristic roots (-1 +- sqrt(1 - 4 eps s)) / (2 eps);
    near the double root a Taylor expansion of cosh/sinh replaces the
    closed form.
    """
    s = np.atleast_1d(np.asarray(stiffness, dtype=float))
    a = -1.0 / (2.0 * eps)
    disc = (1.0 - 4.0 * eps * s) / (4.0 * eps**2)  # d^2, roots are a +- d
    z = disc * t * t
    ec = np.empty_like(s)  # e^{at} cosh(d t)
    es = np.empty_like(s)  # e^{at} sinh(d t)/d
    near = np.abs(1.0 - 4.0 * eps * s) < DEGENERATE_BAND
    near |= np.abs(z) < 1e-4
    real = (disc > 0) & ~near
    cplx = (disc < 0) & ~near
    if real.any():
        d = np.sqrt(disc[real])
        ep = np.exp((a + d) * t)
        em = np.exp((a - d) * t)
        ec[real] = 0.5 * (ep + em)
        es[real] = 0.5 * (ep - em) / d
    if cplx.any():
        w = np.sqrt(-disc[cplx])
        damp = np.exp(a * t)
        ec[cplx] = damp * np.cos(w * t)
        es[cplx] = damp * np.sin(w * t) / w
    if near.any():
        zz = z[near]
        damp = np.exp(a * t)
        ec[near] = damp * (1 + zz / 2 + zz**2 / 24 + zz**3 / 720 + zz**4 / 40320)
        es[near] = damp * t * (1 + zz / 6 + zz**2 / 120 + zz**3 / 5040 + zz**4 / 362880)
    # exp(tB) = e^{at}[cosh I + sinh/d (B - aI)]
    P = np.empty(s.shape + (2, 2))
    P[..., 0, 0] = ec + es * (-a)
    P[..., 0, 1] = es
    P[..., 1, 0] = es * (-s / eps)
    P[..., 1, 1] = ec + es * (-1.0 / eps - a)
    return P


def linear_semigroup_step(model: SpectralModel, state: StatePair, theta: float, t: float) -> StatePair:
    if t < 0:
        raise ValueError("t must be nonnegative")
    P = mode_propagator(model.lam + theta, state.eps, t)
    u = P[:, 0, 0] * state.u + P[:, 0, 1] * state.v
    v = P[:, 1, 0] * state.u + P[:, 1, 1] * state.v
    return StatePair(u, v, state.eps, state.level)


def duhamel_weights(B: np.ndarray, b: np.ndarray, h: float):
    """Exact weights for int_0^h exp((h-p)B) b g(p) dp with g linear in p.

    Returns (W0, W1) so that the integral equals W0 g(0) + W1 g(h). Uses
    the augmented-matrix exponential, so singular B is fine.
    """
    B = np.asarray(B, float)
    m = B.shape[-1]
    aug = np.zeros(B.shape[:-2] + (m + 2, m + 2))
    aug[..., :m, :m] = B * h
    aug[..., :m, m] = np.asarray(b, float) * h
    aug[..., m, m + 1] = 1.0
    E = scipy.linalg.expm(aug)
    J0 = E[..., :m, m]            # int exp((h-p)B) b dp
    K1 = E[..., :m, m + 1]        # int exp((h-p)B) b (p/h) dp
    return J0 - K1, K1


class WaveStepper:
    """Exponential trapezoidal stepper for the wave equation in modal form."""

    def __init__(self, model: SpectralModel, f: NonlinearitySpec, eps: float, h: float, theta: float = 0.0):
        if not 0 < eps <= 1:
            raise ValueError("eps must lie in (0, 1]")
        if h <= 0:
            raise ValueError("h must be positive")
        self.model, self.f, self.eps, self.h, self.theta = model, f, eps, h, theta
        self._cache = {}

    def _coeffs(self, h):
        if h not in self._cache:
            s = self.model.lam + self.theta
            E = mode_propagator(s, self.eps, h)
            B = np.zeros((s.size, 2, 2))
            B[:, 0, 1] = 1.0
            B[:, 1, 0] = -s / self.eps
            B[:, 1, 1] = -1.0 / self.eps
            W0, W1 = duhamel_weights(B, np.array([0.0, 1.0 / self.eps]), h)
            self._cache[h] = (E, W0, W1)
        return self._cache[h]

    def forcing(self, u):
        return nemitski(self.f, self.model, u)

    def step(self, u, v, h=None, g0=None, depth=0):
        """Advance (u, v) by h; returns (u1, v1, g1) with g1 = f(u1) projected."""
        h = self.h if h is None else h
        try:
            return self._try_step(u, v, h, g0)
        except _NoConvergence:
            if depth >= MAX_HALVINGS:
                raise IntegrationError(
                    f"fixed-point iteration diverged after {MAX_HALVINGS} halvings") from None
            log.info("fixed-point divergence at h=%g; halving", h)
            u, v, g0 = self.step(u, v, h / 2, g0, depth + 1)
            return self.step(u, v, h / 2, g0, depth + 1)

    def _try_step(self, u, v, h, g0):
        E, W0, W1 = self._coeffs(h)
        if g0 is None:
            g0 = self.forcing(u)
        ul = E[:, 0, 0] * u + E[:, 0, 1] * v + W0[:, 0] * g0
        vl = E[:, 1, 0] * u + E[:, 1, 1] * v + W0[:, 1] * g0
        g1 = g0
        u1 = ul + W1[:, 0] * g1
        prev = np.inf
        for _ in range(40):
            g1 = self.forcing(u1)
            u_new = ul + W1[:, 0] * g1
            delta = np.max(np.abs(u_new - u1))
            u1 = u_new
            if delta <= 1e-14 * (1.0 + np.max(np.abs(u1))):
                break
            if not np.isfinite(delta) or (delta > prev and delta > 1e-10):
                raise _NoConvergence
            prev = delta
        else:
            raise _NoConvergence
        g1 = self.forcing(u1)
        v1 = vl + W1[:, 1] * g1
        return u1, v1, g1


class ParabolicStepper(WaveStepper):
    """Same rule for u' = -A u + f(u)."""

    def __init__(self, model, f, h):
        if h <= 0:
            raise ValueError("h must be positive")
        self.model, self.f, self.h, self.eps, self.theta = model, f, h, 0.0, 0.0
        self._cache = {}

    def _coeffs(self, h):
        if h not in self._cache:
            B = -self.model.lam[:, None, None]
            W0, W1 = duhamel_weights(B, np.array([1.0]), h)
            self._cache[h] = (np.exp(-self.model.lam * h), W0[:, 0], W1[:, 0])
        return self._cache[h]

    def step(self, u, v=None, h=None, g0=None):
        h = self.h if h is None else h
        E, W0, W1 = self._coeffs(h)
        if g0 is None:
            g0 = self.forcing(u)
        base = E * u + W0 * g0
        u1 = base + W1 * g0
        prev = np.inf
        for _ in range(40):
            g1 = self.forcing(u1)
            u_new = base + W1 * g1
            delta = np.max(np.abs(u_new - u1))
            u1 = u_new
            if delta <= 1e-14 * (1.0 + np.max(np.abs(u1))):
                break
            if not np.isfinite(delta) or (delta > prev and delta > 1e-10):
                if h < self.h / 2**MAX_HALVINGS:
                    raise IntegrationError("fixed-point iteration diverged")
                ua, _, ga = self.step(u, None, h / 2, g0)
                return self.step(ua, None, h / 2, ga)
            prev = delta
        g1 = self.forcing(u1)
        return u1, -self.model.lam * u1 + g1, g1


class _NoConvergence(Exception):
    pass


def mild_step(model: SpectralModel, state: StatePair, f: NonlinearitySpec, h: float) -> StatePair:
    u, v, _ = WaveStepper(model, f, state.eps, h).step(state.u, state.v)
    return StatePair(u, v, state.eps)


# -- trajectories ----------------------------------------------------------

@dataclass
class Trajectory:
    """Stored samples of a run. ``eps == 0`` marks a parabolic run (v = u_t)."""

    times: np.ndarray
    u: np.ndarray
    v: np.ndarray
    eps: float
    h: float
    forcing: np.ndarray
    blown_up: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else self.h

    def R_series(self, model: SpectralModel) -> np.ndarray:
        return norm_H(model, self.u, 1) ** 2 + self.eps * norm_H(model, self.v, 0) ** 2

    def R(self, model: SpectralModel) -> float:
        return float(np.max(self.R_series(model)))

    def w(self, model: SpectralModel) -> np.ndarray:
        """Time derivative of v from the modal identity eps w = -v - A u + f(u)."""
        if self.eps == 0:
            raise ValueError("w is defined for wave trajectories only")
        return (-self.v - model.lam * self.u + self.forcing) / self.eps

    def window(self, t0: float, t1: float | None = None) -> "Trajectory":
        t1 = self.times[-1] if t1 is None else t1
        sel = (self.times >= t0 - 1e-12) & (self.times <= t1 + 1e-12)
        return Trajectory(self.times[sel], self.u[sel], self.v[sel], self.eps, self.h,
                          self.forcing[sel], self.blown_up, dict(self.meta))

    def omega_table(self, model: SpectralModel, max_lag: int | None = None):
        """(eta, omega(eta)) with omega the running sup of ||u(t)-u(s)||_{H^1_0}."""
        n = len(self.times)
        max_lag = min(n - 1, max_lag or n - 1)
        if max_lag < 1:
            return np.array([0.0]), np.array([0.0])
        dense = list(range(1, min(64, max_lag) + 1))
        geo = np.unique(np.geomspace(65, max_lag, 48).astype(int)) if max_lag > 64 else []
        lags = np.array(dense + [int(g) for g in geo if g > 64])
        sq = np.sqrt(model.lam)
        omega = np.array([np.max(np.linalg.norm((self.u[l:] - self.u[:-l]) * sq, axis=1)) for l in lags])
        omega = np.maximum.accumulate(omega)
        return np.concatenate([[0.0], lags * self.dt]), np.concatenate([[0.0], omega])


def integrate(model: SpectralModel, initial: StatePair, f: NonlinearitySpec, T: float, h: float,
              store_every: int = 1, ceiling: float = BLOWUP_CEILING) -> Trajectory:
    """March the mild formulation on [0, T]. Batched initial data is allowed."""
    stepper = WaveStepper(model, f, initial.eps, h)
    nsteps = int(round(T / h))
    u, v = initial.u.copy(), initial.v.copy()
    g = stepper.forcing(u)
    ts, us, vs, gs = [0.0], [u], [v], [g]
    blown = False
    for i in range(1, nsteps + 1):
        try:
            u, v, g = stepper.step(u, v, g0=g)
        except IntegrationError as exc:
            # the implicit stage only fails this way when the solution is escaping
            log.warning("blow-up suspected at t=%g: %s", i * h, exc)
            blown = True
            break
        z0 = np.max(StatePair(u, v, initial.eps).norm(model))
        if not np.isfinite(z0) or z0 > ceiling:
            log.warning("blow-up detected at t=%g (Z0 norm %.3g)", i * h, z0)
            blown = True
            break
        if i % store_every == 0:
            ts.append(i * h)
            us.append(u)
            vs.append(v)
            gs.append(g)
    return Trajectory(np.array(ts), np.array(us), np.array(vs), initial.eps, h, np.array(gs), blown)


def parabolic_integrate(model: SpectralModel, u0, f: NonlinearitySpec, T: float, h: float,
                        store_every: int = 1, ceiling: float = BLOWUP_CEILING) -> Trajectory:
    stepper = ParabolicStepper(model, f, h)
    nsteps = int(round(T / h))
    u = np.asarray(u0, float).copy()
    g = stepper.forcing(u)
    ts, us, vs, gs = [0.0], [u], [-model.lam * u + g], [g]
    blown = False
    for i in range(1, nsteps + 1):
        try:
            u, v, g = stepper.step(u, g0=g)
        except IntegrationError as exc:
            log.warning("blow-up suspected at t=%g: %s", i * h, exc)
            blown = True
            break
        if not np.all(np.isfinite(u)) or np.max(norm_H(model, u, 1)) > ceiling:
            log.warning("blow-up detected at t=%g", i * h)
            blown = True
            break
        if i % store_every == 0:
            ts.append(i * h)
            us.append(u)
            vs.append(v)
            gs.append(g)
    return Trajectory(np.array(ts), np.array(us), np.array(vs), 0.0, h, np.array(gs), blown)


# -- Lyapunov functional ---------------------------------------------------

def lyapunov(model: SpectralModel, f: NonlinearitySpec, u, v, eps: float):
    return (0.5 * eps * norm_H(model, v, 0) ** 2 + 0.5 * norm_H(model, u, 1) ** 2
            - potential_integral(f, model, u))


@dataclass
class DissipationReport:
    max_residual: float
    monotone: bool
    max_increase: float
    L: np.ndarray
    residual: np.ndarray


def dissipation_check(model: SpectralModel, f: NonlinearitySpec, traj: Trajectory,
                      monotone_tol: float = 1e-10) -> DissipationReport:
    """Compare the discrete derivative of L with -||v||^2 (trapezoidal average)."""
    L = lyapunov(model, f, traj.u, traj.v, traj.eps)
    dt = np.diff(traj.times)
    v2 = norm_H(model, traj.v, 0) ** 2
    residual = np.diff(L) / dt + 0.5 * (v2[1:] + v2[:-1])
    inc = np.diff(L)
    max_inc = float(inc.max()) if inc.size else 0.0
    return DissipationReport(float(np.max(np.abs(residual))), max_inc <= monotone_tol * (1 + np.abs(L).max()),
                             max_inc, L, residual)
