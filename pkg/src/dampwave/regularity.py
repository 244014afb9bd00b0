"""Regularity checks on stored trajectories: VOC bootstrap and eps-uniform bounds.

Notation: along a trajectory (u, v) with v = u_t, the differentiated pair is
(v, w) with w = v_t obtained from the modal identity
eps w = -v - A u + f(u).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .linearized import DecayCertificate, EvolutionSystem
from .nonlinearity import NonlinearitySpec, derivative_bound, frechet_apply, jacobian, linf_embedding_constant, nemitski
from .operator_core import SpectralModel, norm_H
from .semiflow import Trajectory, duhamel_weights, lyapunov

# relative size of floating-point noise in w from the modal identity
ROUNDOFF = 1e-13


class RegularityError(RuntimeError):
    def __init__(self, message, detail=None):
        super().__init__(message)
        self.detail = detail or {}


def _sq(model, c, kappa):
    return norm_H(model, c, kappa) ** 2


def z0_theta_norm(model: SpectralModel, v, w, eps: float, theta: float) -> np.ndarray:
    """Hilbert norm on H^1_0[theta] x L^2 with the eps weight."""
    return np.sqrt(np.sum((model.lam + theta) * v**2, axis=-1) + eps * np.sum(w**2, axis=-1))


# -- VOC reconstruction --------------------------------------------------------

@dataclass
class VOCResult:
    times: np.ndarray
    v: np.ndarray
    w: np.ndarray
    error: np.ndarray
    scale: float
    tail: np.ndarray
    quadrature: np.ndarray
    T_w: float
    evaluated: np.ndarray

    @property
    def budget(self) -> np.ndarray:
        return self.tail + self.quadrature

    @property
    def max_error(self) -> float:
        return float(self.error[self.evaluated].max()) if self.evaluated.any() else 0.0

    @property
    def within_budget(self) -> bool:
        return bool(np.all(self.error[self.evaluated] <= self.budget[self.evaluated]))

    def rows(self):
        for t, e, tb, qb, ok in zip(self.times, self.error, self.tail, self.quadrature, self.evaluated):
            yield {"t": float(t), "error": float(e), "tail_bound": float(tb),
                   "quadrature_bound": float(qb), "evaluated": bool(ok)}


def _voc_series(model, f, traj, theta, stride):
    """Product-integration recursion for int_{t0}^t U(t,p) (0, theta/eps v(p)) dp."""
    system = EvolutionSystem(model, f, traj, theta, stride)
    eps, N, dt = traj.eps, model.N, system.dt
    vbar = traj.v[::stride]
    n = len(system.times)
    out = np.zeros((n, 2 * N))
    I = np.zeros(2 * N)
    b = np.array([0.0, 1.0 / eps])
    for k in range(n - 1):
        frozen = system.frozen(k)
        G = system.step_matrix(k, frozen)
        B = np.zeros((N, 2, 2))
        B[:, 0, 1] = 1.0
        B[:, 1, 0] = -frozen.kappa / eps
        B[:, 1, 1] = -1.0 / eps
        W0, W1 = duhamel_weights(B, b, dt)
        y0 = theta * (frozen.Q.T @ vbar[k])
        y1 = theta * (frozen.Q.T @ vbar[k + 1])
        modal = W0 * y0[:, None] + W1 * y1[:, None]
        I = G @ I
        I[:N] += frozen.Q @ modal[:, 0]
        I[N:] += frozen.Q @ modal[:, 1]
        out[k + 1] = I
    return system.times, out


def voc_reconstruct(model: SpectralModel, f: NonlinearitySpec, traj: Trajectory, theta: float,
                    certificate: DecayCertificate | None, T_w: float, tol: float | None = None) -> VOCResult:
    """Rebuild (v, w) from the forcing (0, theta/eps v) through U at level Z0.

    The integral starts at the window start t0; at a time t the neglected part
    is U(t, t0) (v, w)(t0), bounded by M e^{-rate (t - t0)} sup ||(v, w)||.
    Quadrature error is estimated by comparison with the same rule at twice
    the step.
    """
    if certificate is None:
        raise RegularityError("VOC reconstruction needs a decay certificate for U at level Z0")
    if certificate.level != 0:
        raise RegularityError("certificate must be for the Z0 level")
    if certificate.rate <= 0 or not np.isfinite(certificate.M):
        raise RegularityError("certificate does not show decay")
    eps = traj.eps
    w = traj.w(model)
    norms = z0_theta_norm(model, traj.v, w, eps, theta)
    sup = float(norms.max())

    times, rec = _voc_series(model, f, traj, theta, 1)
    _, rec2 = _voc_series(model, f, traj, theta, 2)
    N = model.N
    quad = np.full(len(times), np.nan)
    quad[::2] = z0_theta_norm(model, rec[::2, :N] - rec2[:, :N][: len(rec[::2])],
                              rec[::2, N:] - rec2[:, N:][: len(rec[::2])], eps, theta)
    # odd samples take the larger neighbouring estimate
    for i in range(1, len(times), 2):
        quad[i] = np.nanmax(quad[max(0, i - 1): i + 2])

    err = z0_theta_norm(model, rec[:, :N] - traj.v, rec[:, N:] - w, eps, theta)
    elapsed = times - times[0]
    # w cancels A u against f(u); that cancellation sets a noise floor
    floor = ROUNDOFF * max(1.0, float(np.max(z0_theta_norm(model, traj.u, traj.v, eps, theta))))
    tail = certificate.M * np.exp(-certificate.rate * elapsed) * sup + floor
    evaluated = elapsed >= T_w - 1e-12
    if tol is not None and evaluated.any() and tail[evaluated].max() > tol:
        need = math.log(certificate.M * sup / tol) / certificate.rate
        raise RegularityError(f"tail bound exceeds tolerance; need T_w >= {need:.4g}", {"required_T_w": need})
    if not evaluated.any():
        raise RegularityError(f"window shorter than T_w={T_w}")
    return VOCResult(times, rec[:, :N], rec[:, N:], err, sup, tail, quad, T_w, evaluated)


# -- Theorem-1 style bound --------------------------------------------------------

def z1_terms(model: SpectralModel, traj: Trajectory) -> dict:
    w = traj.w(model) if traj.eps > 0 else None
    A0u = _sq(model, model.lam * traj.u, 0)
    vH1 = _sq(model, traj.v, 1)
    ew = traj.eps * _sq(model, w, 0) if w is not None else np.zeros_like(vH1)
    return {"A0u": A0u, "vH1": vH1, "eps_w": ew, "total": A0u + vH1 + ew}


@dataclass
class RegularityReport:
    eps: float
    window: tuple
    sup_A0u: float
    sup_v_H1: float
    sup_eps_w: float
    sup_Z1: float
    theorem1_bound: float | None = None
    theorem1_ok: bool | None = None
    theorem2_bound_log10: float | None = None
    theorem2_ok: bool | None = None
    sup_Z0: float | None = None
    theorem2_Z0_ok: bool | None = None
    K: float | None = None
    K_bound: float | None = None
    C_nu: float | None = None
    theta: float | None = None
    voc_error: float | None = None
    voc_budget: float | None = None
    voc_ok: bool | None = None
    identity_residual: float | None = None
    fd_w_discrepancy: float | None = None
    triangle_ok: bool | None = None
    constants: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["window"] = list(self.window)
        return d


def identity_checks(model: SpectralModel, f: NonlinearitySpec, traj: Trajectory) -> dict:
    """Cross-checks of w: the modal identity with a fresh Nemitski evaluation,
    a centered time difference of v, and the termwise triangle chain."""
    w = traj.w(model)
    fresh = nemitski(f, model, traj.u)
    resid = traj.eps * w + traj.v + model.lam * traj.u - fresh
    identity = float(np.max(norm_H(model, resid, 0)))
    if len(traj.times) >= 3:
        fd = (traj.v[2:] - traj.v[:-2]) / (traj.times[2:] - traj.times[:-2])[:, None]
        fd_disc = float(np.max(norm_H(model, fd - w[1:-1], 0)))
    else:
        fd_disc = 0.0
    lhs = norm_H(model, model.lam * traj.u, 0)
    rhs = traj.eps * norm_H(model, w, 0) + norm_H(model, traj.v, 0) + norm_H(model, fresh, 0)
    return {"identity_residual": identity, "fd_discrepancy": fd_disc,
            "triangle_ok": bool(np.all(lhs <= rhs * (1 + 1e-12) + 1e-14))}


def theorem1_check(model: SpectralModel, f: NonlinearitySpec, traj: Trajectory, theta: float,
                   certificate: DecayCertificate, C_tilde: float, R: float, delta: float,
                   voc: VOCResult | None = None) -> RegularityReport:
    terms = z1_terms(model, traj)
    eps = traj.eps
    bound = 4 * certificate.M * R * theta / (delta * eps) + C_tilde**2 * (1 + R**3) ** 2
    sup_total = float(terms["total"].max())
    ids = identity_checks(model, f, traj)
    rep = RegularityReport(
        eps, (float(traj.times[0]), float(traj.times[-1])),
        float(terms["A0u"].max()), float(terms["vH1"].max()), float(terms["eps_w"].max()), sup_total,
        theorem1_bound=float(bound), theorem1_ok=bool(sup_total <= bound), theta=theta,
        identity_residual=ids["identity_residual"], fd_w_discrepancy=ids["fd_discrepancy"],
        triangle_ok=ids["triangle_ok"],
        constants={"M": certificate.M, "rate": certificate.rate, "R": R, "C_tilde": C_tilde, "delta": delta},
    )
    if voc is not None:
        rep.voc_error = voc.max_error
        rep.voc_budget = float(voc.budget[voc.evaluated].min())
        rep.voc_ok = voc.within_budget
    rep.notes.append("bound divides by eps while the supremum weights w by eps; both reported as computed")
    if sup_total > bound:
        dom = max(("A0u", "vH1", "eps_w"), key=lambda k: terms[k].max())
        rep.notes.append(f"bound violated; dominating term {dom}")
    return rep


# -- Lambda functional ---------------------------------------------------------

def lambda_functional(model: SpectralModel, f: NonlinearitySpec, u, v, w, eps: float, theta: float,
                      delta: float, sign: float = -1.0):
    """Z0 energy of (v, w) plus sign * 1/2 int d_u f(u) |v|^2.

    sign = -1 makes the derivative identity exact for
    eps w' = -w - A v + d_u f(u) v; sign = +1 is kept as a diagnostic.
    """
    z = w + delta * v
    E = (0.5 * eps * _sq(model, z, 0) + 0.5 * np.sum((model.lam + theta) * v**2, axis=-1)
         + 0.5 * (eps * delta**2 - delta) * _sq(model, v, 0))
    G = 0.5 * np.sum(v * frechet_apply(f, model, u, v), axis=-1)
    return E + sign * G


def lambda_rhs(model, f, u, v, w, eps, theta, delta, sign=-1.0):
    z = w + delta * v
    cubic = 0.5 * model.integrate(f.d2f(model.to_grid(u)) * model.to_grid(v) ** 3)
    return ((2 * delta * eps - 1) * _sq(model, z, 0) + theta * np.sum(z * v, axis=-1)
            + sign * cubic)


def lambda_derivative_check(model: SpectralModel, f: NonlinearitySpec, traj: Trajectory,
                            theta: float, delta: float) -> dict:
    """Residual of d/dt Lambda + 2 delta Lambda = rhs, with a centered difference."""
    w = traj.w(model)
    out = {}
    for name, sign in (("consistent", -1.0), ("displayed_sign", 1.0)):
        L = lambda_functional(model, f, traj.u, traj.v, w, traj.eps, theta, delta, sign)
        rhs = lambda_rhs(model, f, traj.u, traj.v, w, traj.eps, theta, delta, sign)
        dt = traj.times[2:] - traj.times[:-2]
        lhs = (L[2:] - L[:-2]) / dt + 2 * delta * L[1:-1]
        out[name] = float(np.max(np.abs(lhs - rhs[1:-1])))
    return {"residual": out["consistent"], "residual_displayed_sign": out["displayed_sign"],
            "h": traj.dt}


# -- dissipation integral and Theorem-2 style bound ------------------------------

def integral_bound_K(model: SpectralModel, f: NonlinearitySpec, traj: Trajectory) -> dict:
    v2 = _sq(model, traj.v, 0)
    measured = float(np.trapezoid(v2, traj.times)) if len(v2) > 1 else 0.0
    L = lyapunov(model, f, traj.u, traj.v, traj.eps)
    bound = 2.0 * float(np.max(np.abs(L)))
    return {"K": measured, "bound": bound, "ok": measured <= bound + 1e-12,
            "slack": bound - measured}


def c_nu(model: SpectralModel, f: NonlinearitySpec, R: float, nu: float) -> dict:
    """Young-split constant for 1/2 int f''(u) v^3 <= nu|v|_{H1}^2 + C_nu |v|^2 |v|_{H1}^2.

    Uses |int f'' v^3| <= sup|f''| |v|_inf |v|^2 and |v|_inf <= sqrt(c) |v|_{H1},
    |v| <= lambda_1^{-1/2} |v|_{H1}.
    """
    D2 = derivative_bound(f, model, R, order=2)
    c_inf = linf_embedding_constant(model)
    kappa3 = D2 * math.sqrt(c_inf) / math.sqrt(model.lambda1)
    return {"C_nu": kappa3**2 / (16 * nu), "kappa3": kappa3, "D2": D2, "c_inf": c_inf, "nu": nu}


def theorem2_bound_log10(theta: float, K: float, C_nu: float) -> float:
    if K <= 0:
        return -math.inf
    return math.log10(4 * theta**2 * K) + 2 * C_nu * K / math.log(10)


def theorem2_report(model: SpectralModel, f: NonlinearitySpec, traj: Trajectory, theta: float,
                    R: float, delta: float) -> RegularityReport:
    terms = z1_terms(model, traj)
    Kd = integral_bound_K(model, f, traj)
    cn = c_nu(model, f, R, delta)
    lb = theorem2_bound_log10(theta, Kd["K"], cn["C_nu"])
    sup_total = float(terms["total"].max())
    z0 = terms["vH1"] + terms["eps_w"]
    sup_z0 = float(z0.max())

    floor = (ROUNDOFF * max(1.0, float(terms["A0u"].max()))) ** 2

    def below(x):
        if x <= floor:
            return True
        return lb > -math.inf and math.log10(x) <= lb

    rep = RegularityReport(
        traj.eps, (float(traj.times[0]), float(traj.times[-1])),
        float(terms["A0u"].max()), float(terms["vH1"].max()), float(terms["eps_w"].max()), sup_total,
        theorem2_bound_log10=lb if lb > -math.inf else None, theorem2_ok=below(sup_total),
        sup_Z0=sup_z0, theorem2_Z0_ok=below(sup_z0),
        K=Kd["K"], K_bound=Kd["bound"], C_nu=cn["C_nu"], theta=theta,
        constants={k: v for k, v in cn.items() if k != "C_nu"} | {"R": R, "delta": delta},
    )
    rep.notes.append("K is measured over the stored window (integral over the real line truncated)")
    return rep


@dataclass
class UniformityVerdict:
    reports: list
    ratio: float
    factor: float
    passed: bool
    all_bounds_ok: bool
    trend: list
    z1_bounds_ok: bool = True

    def to_dict(self) -> dict:
        return {"ratio": self.ratio, "factor": self.factor, "passed": self.passed,
                "all_bounds_ok": self.all_bounds_ok, "z1_bounds_ok": self.z1_bounds_ok,
                "trend": self.trend,
                "reports": [r.to_dict() for r in self.reports]}


def uniformity_verdict(reports, factor: float = 2.0) -> UniformityVerdict:
    sups = np.array([r.sup_Z1 for r in reports])
    ratio = float(sups.max() / sups.min()) if sups.min() > 0 else (1.0 if sups.max() == 0 else math.inf)
    trend = [{"eps": r.eps, "sup_Z1": r.sup_Z1} for r in sorted(reports, key=lambda r: -r.eps)]
    # the exponential bound controls (v, w); the A u term enters the Z1 sum separately
    ok_bounds = all(r.theorem2_Z0_ok for r in reports)
    z1_ok = all(r.theorem2_ok for r in reports)
    return UniformityVerdict(list(reports), ratio, factor, bool(ratio <= factor), ok_bounds, trend, z1_ok)
