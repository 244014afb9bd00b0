"""Linearized evolution system along a stored trajectory and its decay certificate.

States of the linearized problem are stacked vectors x = (v, w) of length 2N.
The evolution operator U(t, s) is realized by frozen-coefficient steps: on
each substep [tau, tau + dt] the exact semigroup of the frozen generator is
applied, followed by a trapezoidal correction for C(p) - C(tau).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .nonlinearity import NonlinearitySpec, derivative_bound, jacobian
from .operator_core import SpectralModel
from .semiflow import Trajectory, mode_propagator

log = logging.getLogger(__name__)

FIT_TOL = 0.02


class CertificateRefused(RuntimeError):
    def __init__(self, message, detail=None):
        super().__init__(message)
        self.detail = detail or {}


@dataclass
class EnergyParams:
    eps: float
    theta: float
    delta: float
    eta: float
    rho: float
    theta_rho: float

    def validate(self, lambda1: float):
        if not 0 < self.delta <= min(0.5, lambda1 / 2) + 1e-12:
            raise ValueError(f"delta must lie in (0, min(1/2, lambda1/2)] = (0, {min(0.5, lambda1 / 2):.6g}]")
        if not 0 < self.rho <= 0.5:
            raise ValueError("rho must lie in (0, 1/2]")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.theta < 0:
            raise ValueError("theta must be nonnegative")


@dataclass(eq=False)
class FrozenOperator:
    """A[theta] minus multiplication by d_u f(u_bar(tau)), in the eigenbasis."""

    tau: float
    matrix: np.ndarray
    kappa: np.ndarray = field(init=False)
    Q: np.ndarray = field(init=False)

    def __post_init__(self):
        self.matrix = 0.5 * (self.matrix + self.matrix.T)
        self.kappa, self.Q = np.linalg.eigh(self.matrix)

    @classmethod
    def at(cls, model: SpectralModel, f: NonlinearitySpec, u_bar, theta: float, tau: float = 0.0):
        K = np.diag(model.lam + theta) - jacobian(f, model, u_bar)
        return cls(tau, K)

    @property
    def positive_definite(self) -> bool:
        return bool(self.kappa[0] > 0)

    def require_pd(self):
        if not self.positive_definite:
            raise CertificateRefused(
                f"frozen operator at tau={self.tau:g} is not positive definite "
                f"(smallest eigenvalue {self.kappa[0]:.4g}); theta below threshold",
                {"tau": self.tau, "kappa_min": float(self.kappa[0])},
            )

    def inverse(self) -> np.ndarray:
        self.require_pd()
        return (self.Q / self.kappa) @ self.Q.T

    def sq_norm(self, c, kappa: int) -> np.ndarray:
        y = np.asarray(c) @ self.Q
        if kappa == 1:
            return np.sum(self.kappa * y**2, axis=-1)
        self.require_pd()
        return np.sum(y**2 / self.kappa, axis=-1)


# -- shift threshold -----------------------------------------------------------

@dataclass
class ThetaSelection:
    theta: float
    formula_theta: float
    D_R: float
    doublings: int
    worst_ratios: dict
    log: list


def frozen_equivalence_check(model: SpectralModel, frozen: FrozenOperator, theta: float,
                             rho: float, fields: np.ndarray, tol: float = 1e-12) -> dict:
    """Two-sided shifted-vs-frozen norm comparisons on sample fields.

    Returns counts of violations and the extreme observed ratios.
    """
    D = model.lam + theta
    h1 = np.sum(D * fields**2, axis=-1)
    h1t = frozen.sq_norm(fields, 1)
    hm1 = np.sum(fields**2 / D, axis=-1)
    if frozen.positive_definite:
        hm1t = frozen.sq_norm(fields, -1)
    else:
        hm1t = np.full_like(hm1, np.nan)
    r3 = h1t / h1
    r4 = hm1 / hm1t
    lo, hi = 1 - rho, 1 + rho
    v3 = int(np.sum((r3 < lo * (1 - tol)) | (r3 > hi * (1 + tol))))
    v4 = int(np.sum(~((r4 >= lo * (1 - tol)) & (r4 <= hi * (1 + tol)))))
    return {"frozen_h1_violations": v3, "frozen_hm1_violations": v4,
            "frozen_h1_range": (float(np.min(r3)), float(np.max(r3))),
            "frozen_hm1_range": (float(np.nanmin(r4)), float(np.nanmax(r4))) if frozen.positive_definite else None}


def theta_rho(model: SpectralModel, f: NonlinearitySpec, rho: float, R: float,
              u_bars, rng: np.random.Generator, n_fields: int = 1000,
              max_doublings: int = 10) -> ThetaSelection:
    """Certified shift making the frozen norms (1 +- rho)-equivalent to the shifted ones.

    Starts from theta = 2 D(R) / rho - lambda_1, with D(R) the pointwise bound on
    |d_u f| over the H^1_0-ball of radius^2 R, then verifies on random fields
    at every frozen state in ``u_bars``.
    """
    if not 0 < rho <= 0.5:
        raise ValueError("rho must lie in (0, 1/2]")
    D_R = derivative_bound(f, model, R, order=1)
    theta0 = max(0.0, 2.0 * D_R / rho - model.lambda1)
    u_bars = np.atleast_2d(u_bars)
    k = np.arange(1, model.N + 1)
    fields = rng.standard_normal((n_fields, model.N)) * k**-1.0
    theta = theta0
    notes = [f"D(R)={D_R:.6g} from R={R:.6g}; theta_rho formula = {theta0:.6g}"]
    for doubling in range(max_doublings + 1):
        worst = {"frozen_h1": (np.inf, -np.inf), "frozen_hm1": (np.inf, -np.inf)}
        ok = True
        for ub in u_bars:
            frozen = FrozenOperator.at(model, f, ub, theta)
            res = frozen_equivalence_check(model, frozen, theta, rho, fields)
            ok &= res["frozen_h1_violations"] == 0 and res["frozen_hm1_violations"] == 0
            worst["frozen_h1"] = (min(worst["frozen_h1"][0], res["frozen_h1_range"][0]), max(worst["frozen_h1"][1], res["frozen_h1_range"][1]))
            if res["frozen_hm1_range"] is not None:
                worst["frozen_hm1"] = (min(worst["frozen_hm1"][0], res["frozen_hm1_range"][0]), max(worst["frozen_hm1"][1], res["frozen_hm1_range"][1]))
        if ok:
            return ThetaSelection(theta, theta0, D_R, doubling, worst, notes)
        new = max(2.0 * theta, 1.0)
        notes.append(f"verification failed at theta={theta:.6g}; retrying with {new:.6g}")
        log.info(notes[-1])
        theta = new
    raise CertificateRefused(f"theta_rho verification failed after {max_doublings} doublings",
                             {"log": notes})


def choose_eta(delta: float, eta_table, omega_table, C_tilde: float, R: float,
               alpha: float, beta_h: float) -> float:
    """Largest tabulated eta with 2 C (1 + 2 R^alpha)^2 omega(eta)^(2 beta_h) <= delta."""
    eta_table = np.asarray(eta_table, float)
    omega_table = np.asarray(omega_table, float)
    lhs = 2.0 * C_tilde * (1 + 2 * R**alpha) ** 2 * omega_table ** (2 * beta_h)
    ok = (lhs <= delta) & (eta_table > 0)
    if not ok.any():
        raise CertificateRefused("no tabulated eta satisfies the smallness condition",
                                 {"omega_min_positive": float(omega_table[eta_table > 0].min())
                                  if (eta_table > 0).any() else None})
    # the table is nondecreasing in eta, so admissible etas form a prefix
    admissible = np.flatnonzero(ok)
    return float(eta_table[admissible].max())


def rho_for_eta(delta: float, eta: float) -> float:
    """Largest rho with (1 + rho)/(1 - rho) exp(-delta eta / 2) <= 1, capped at 1/2."""
    return float(min(0.5, np.tanh(delta * eta / 4.0)))


# -- energy functionals ------------------------------------------------------

def energy_matrix(model: SpectralModel, params: EnergyParams, level: int,
                  frozen: FrozenOperator | None = None) -> np.ndarray:
    """Quadratic form Q with energy(x) = x @ Q @ x for x = (v, w).

    Level -1 gives E_theta (or E_{theta,j} when ``frozen`` is supplied);
    level 0 gives the Z_0 analogue.
    """
    eps, d, N = params.eps, params.delta, model.N
    if frozen is None:
        K = np.diag(model.lam + params.theta)
    else:
        K = frozen.matrix
    I = np.eye(N)
    Q = np.empty((2 * N, 2 * N))
    if level == -1:
        Kinv = frozen.inverse() if frozen is not None else np.diag(1.0 / (model.lam + params.theta))
        Q[:N, :N] = (eps * d * d + eps * d * d - d) * Kinv + I
        Q[:N, N:] = eps * d * Kinv
        Q[N:, :N] = eps * d * Kinv
        Q[N:, N:] = eps * Kinv
    elif level == 0:
        Q[:N, :N] = (2 * eps * d * d - d) * I + K
        Q[:N, N:] = eps * d * I
        Q[N:, :N] = eps * d * I
        Q[N:, N:] = eps * I
    else:
        raise ValueError("level must be 0 or -1")
    return 0.5 * Q


def energy_E(model: SpectralModel, v, w, params: EnergyParams, level: int = -1,
             frozen: FrozenOperator | None = None) -> np.ndarray:
    x = np.concatenate([np.atleast_2d(v), np.atleast_2d(w)], axis=-1)
    Q = energy_matrix(model, params, level, frozen)
    out = np.einsum("bi,ij,bj->b", x, Q, x)
    return out if np.ndim(v) > 1 else float(out[0])


def norm_weights(model: SpectralModel, eps: float, theta: float, level: int) -> np.ndarray:
    """Diagonal weights making the Hilbert Z_{eps,level}[theta] norm Euclidean."""
    lam = model.lam + theta
    if level == 0:
        return np.concatenate([np.sqrt(lam), np.full(model.N, np.sqrt(eps))])
    return np.concatenate([np.ones(model.N), np.sqrt(eps / lam)])


# -- evolution system ----------------------------------------------------------

class EvolutionSystem:
    """U(t, s) for eps w' = -w - A[theta] v + d_u f(u_bar(t)) v, v' = w.

    Substeps coincide with every ``stride``-th stored trajectory sample.
    """

    def __init__(self, model: SpectralModel, f: NonlinearitySpec, traj: Trajectory,
                 theta: float, stride: int = 1):
        if traj.eps <= 0:
            raise ValueError("evolution system needs a wave trajectory (eps > 0)")
        self.model, self.f, self.theta = model, f, theta
        self.eps = traj.eps
        self.stride = stride
        self.times = traj.times[::stride]
        self.u_bar = traj.u[::stride]
        self.dt = float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0
        self._J = {}

    def J(self, k: int) -> np.ndarray:
        if k not in self._J:
            if len(self._J) > 4:
                self._J.pop(next(iter(self._J)))
            self._J[k] = jacobian(self.f, self.model, self.u_bar[k])
        return self._J[k]

    def frozen(self, k: int) -> FrozenOperator:
        return FrozenOperator(float(self.times[k]), np.diag(self.model.lam + self.theta) - self.J(k))

    def frozen_semigroup(self, frozen: FrozenOperator, t: float) -> np.ndarray:
        """exp(t G) for the frozen generator, via its modal factorization."""
        P = mode_propagator(frozen.kappa, self.eps, t)
        Q = frozen.Q
        N = self.model.N
        out = np.empty((2 * N, 2 * N))
        out[:N, :N] = (Q * P[:, 0, 0]) @ Q.T
        out[:N, N:] = (Q * P[:, 0, 1]) @ Q.T
        out[N:, :N] = (Q * P[:, 1, 0]) @ Q.T
        out[N:, N:] = (Q * P[:, 1, 1]) @ Q.T
        return out

    def step_matrix(self, k: int, frozen: FrozenOperator | None = None) -> np.ndarray:
        """Propagator from times[k] to times[k+1]."""
        N = self.model.N
        G = self.frozen_semigroup(frozen or self.frozen(k), self.dt)
        dJ = self.J(k + 1) - self.J(k)
        if np.any(dJ):
            corr = (0.5 * self.dt / self.eps) * dJ
            G[N:, :] += corr @ G[:N, :]
        return G

    def index(self, t: float) -> int:
        k = int(round((t - self.times[0]) / self.dt)) if self.dt else 0
        if not (0 <= k < len(self.times)) or abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"time {t} not on the substep grid / outside the trajectory window")
        return k

    def propagate(self, s: float, t: float, x0) -> np.ndarray:
        if t < s:
            raise ValueError("need t >= s")
        i, j = self.index(s), self.index(t)
        x = np.array(x0, dtype=float)
        for k in range(i, j):
            x = self.step_matrix(k) @ x
        return x


def propagate_U(model, f, traj, theta, s, t, v, w, stride=1):
    x = EvolutionSystem(model, f, traj, theta, stride).propagate(s, t, np.concatenate([v, w]))
    return x[:model.N], x[model.N:]


# -- decay certificate ----------------------------------------------------------

@dataclass
class DecayCertificate:
    M: float
    rate: float
    level: int
    samples: int
    window: tuple
    fit_residual: float
    interval_rates: list
    interval_ok: bool
    prefactor_ok: bool
    prefactor_max_ratio: float
    passed: bool
    params: dict
    series: dict = field(repr=False, default_factory=dict)
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "M": self.M, "rate": self.rate,
            "level": "Z0" if self.level == 0 else "Zm1",
            "samples": self.samples, "window": list(self.window),
            "fit_residual": self.fit_residual,
            "interval_min_rate": min(self.interval_rates) if self.interval_rates else None,
            "intervals": len(self.interval_rates),
            "interval_ok": self.interval_ok, "prefactor_ok": self.prefactor_ok,
            "prefactor_max_ratio": self.prefactor_max_ratio,
            "passed": self.passed, **self.params, "notes": self.notes,
        }


def _form_ratio(Lq: np.ndarray, Phi: np.ndarray) -> float:
    """sup_x (Phi x)^T Q (Phi x) / x^T Q x with Q = Lq Lq^T."""
    A = scipy.linalg.solve_triangular(Lq, (Lq.T @ Phi).T, lower=True).T
    return float(np.linalg.norm(A, 2) ** 2)


def verify_interval_decay(system: EvolutionSystem, params: EnergyParams, level: int,
                          s: float | None = None, t: float | None = None,
                          max_evals_per_interval: int = 12, fit_tol: float = FIT_TOL,
                          require_interval: bool = True) -> DecayCertificate:
    """Certify exponential decay of U(t, s) on [s, t].

    Propagates the full basis, checks per-interval contraction of the frozen
    energies at rate >= delta (1 - fit_tol), fits the operator-norm decay
    over [s + 5 eta, t] and checks the iterated energy bound with prefactor
    (1 + rho)/(1 - rho) at rate delta/2.
    """
    model = system.model
    params.validate(model.lambda1)
    s = system.times[0] if s is None else s
    t = system.times[-1] if t is None else t
    i0, i1 = system.index(s), system.index(t)
    n_eta = max(1, int(round(params.eta / system.dt)))
    N2 = 2 * model.N
    wts = norm_weights(model, params.eps, params.theta, level)

    Q_unfrozen = energy_matrix(model, params, level)
    L_unfrozen = np.linalg.cholesky(Q_unfrozen)
    prefactor = (1 + params.rho) / (1 - params.rho)

    X = np.eye(N2)
    times, opnorm, prefactor_ratios = [s], [1.0], [1.0]
    interval_idx, interval_ratio = [0], [1.0]
    interval_rates, failures = [], []
    k = i0
    j = 0
    while k < i1:
        kj_end = min(k + n_eta, i1)
        frozen = system.frozen(k)
        Qj = energy_matrix(model, params, level, frozen)
        try:
            Lj = np.linalg.cholesky(Qj)
        except np.linalg.LinAlgError:
            raise CertificateRefused(f"frozen energy on interval {j} is not positive definite",
                                     {"interval": j}) from None
        Y = np.eye(N2)
        t_j = system.times[k]
        evals = set(np.unique(np.linspace(k + 1, kj_end, min(max_evals_per_interval, kj_end - k)).astype(int)))
        worst_rate = np.inf
        for kk in range(k, kj_end):
            G = system.step_matrix(kk)
            Y = G @ Y
            X = G @ X
            if kk + 1 in evals:
                tk = system.times[kk + 1]
                ratio = _form_ratio(Lj, Y)
                rate_j = -np.log(max(ratio, 1e-300)) / (tk - t_j)
                worst_rate = min(worst_rate, rate_j)
                times.append(tk)
                interval_idx.append(j)
                interval_ratio.append(ratio)
                opnorm.append(np.linalg.norm((X * (1.0 / wts)) * wts[:, None], 2))
                prefactor_ratios.append(_form_ratio(L_unfrozen, X) / (prefactor * np.exp(-0.5 * params.delta * (tk - s))))
        interval_rates.append(float(worst_rate))
        if worst_rate < params.delta * (1 - fit_tol):
            failures.append({"interval": j, "start": float(t_j), "rate": float(worst_rate)})
        k = kj_end
        j += 1

    times = np.array(times)
    opnorm = np.array(opnorm)
    fit_start = s + 5 * params.eta
    sel = times >= fit_start - 1e-12
    if sel.sum() < 3:
        sel = times >= s + 0.5 * (t - s)
    tt = times[sel] - s
    logn = np.log(opnorm[sel])
    A = np.vstack([tt, np.ones_like(tt)]).T
    coef, res, *_ = np.linalg.lstsq(A, logn, rcond=None)
    rate = float(-coef[0])
    fit_residual = float(np.sqrt(np.mean((A @ coef - logn) ** 2)))
    M = float(np.max(opnorm * np.exp(rate * (times - s)))) if rate > 0 else float("inf")
    prefactor_max = float(np.max(prefactor_ratios))
    prefactor_ok = prefactor_max <= 1 + 1e-8
    interval_ok = not failures
    passed = rate >= params.delta / 2 and np.isfinite(M) and (interval_ok or not require_interval)
    notes = ["energy sandwich and operator norms use the Hilbert (sum-of-squares) Z-norm"]
    if failures:
        notes.append(f"contraction failures: {failures[:5]}")
    return DecayCertificate(
        M, rate, level, len(times), (float(s), float(t)), fit_residual, interval_rates,
        interval_ok, prefactor_ok, prefactor_max, bool(passed),
        {"eps": params.eps, "theta": params.theta, "theta_rho": params.theta_rho,
         "eta": params.eta, "rho": params.rho, "delta": params.delta},
        {"t": times, "opnorm": opnorm, "prefactor_ratio": np.array(prefactor_ratios),
         "interval": np.array(interval_idx), "interval_ratio": np.array(interval_ratio)}, notes,
    )
