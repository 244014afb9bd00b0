"""Point-cloud attractors for the wave and parabolic flows, and their semidistance."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import spearmanr

from .nonlinearity import NonlinearitySpec, jacobian, nemitski
from .operator_core import SpectralModel, norm_H
from .semiflow import StatePair, integrate, parabolic_integrate

log = logging.getLogger(__name__)

EQ_RESIDUAL_TOL = 1e-10
DEDUPE_TOL = 1e-6


def equilibrium_residual(model: SpectralModel, f: NonlinearitySpec, u) -> float:
    return float(norm_H(model, model.lam * u - nemitski(f, model, u), 0))


def default_seeds(model: SpectralModel, modes=4, amplitudes=(0.5, 1.5)) -> np.ndarray:
    seeds = [np.zeros(model.N)]
    for k in range(1, min(modes, model.N) + 1):
        for a in amplitudes:
            for sign in (1, -1):
                seeds.append(model.mode(k, sign * a))
    return np.array(seeds)


def find_equilibria(model: SpectralModel, f: NonlinearitySpec, seeds=None,
                    max_iter: int = 60, tol: float = EQ_RESIDUAL_TOL) -> list[np.ndarray]:
    """Damped Newton on A u = f(u) in coefficient space, deduplicated in H^1_0."""
    seeds = default_seeds(model) if seeds is None else np.atleast_2d(seeds)
    found: list[np.ndarray] = []
    for i, u in enumerate(seeds):
        u = np.array(u, float)
        res = equilibrium_residual(model, f, u)
        for _ in range(max_iter):
            if res <= tol * 1e-2:
                break
            G = model.lam * u - nemitski(f, model, u)
            try:
                du = np.linalg.solve(np.diag(model.lam) - jacobian(f, model, u), G)
            except np.linalg.LinAlgError:
                break
            step = 1.0
            while step > 1e-4:
                trial = u - step * du
                r = equilibrium_residual(model, f, trial)
                if np.isfinite(r) and r < res:
                    break
                step /= 2
            u, res = trial, r
            if not np.isfinite(res):
                break
        if not (np.isfinite(res) and res <= tol):
            log.info("Newton from seed %d did not converge (residual %.3g); skipped", i, res)
            continue
        if all(norm_H(model, u - e, 1) > DEDUPE_TOL for e in found):
            found.append(u)
    found.sort(key=lambda e: (round(float(norm_H(model, e, 1)), 8), float(e[0])))
    return found


def unstable_directions(model: SpectralModel, f: NonlinearitySpec, u_eq, eps: float):
    """Growth rates and (u, v) directions of the linearization at an equilibrium."""
    kappa, Q = np.linalg.eigh(np.diag(model.lam) - jacobian(f, model, u_eq))
    out = []
    for k in np.flatnonzero(kappa < 0):
        q = Q[:, k] * np.sign(Q[np.argmax(np.abs(Q[:, k])), k])
        if eps > 0:
            r = (-1 + np.sqrt(1 - 4 * eps * kappa[k])) / (2 * eps)
        else:
            r = -kappa[k]
        out.append((float(r), q, r * q))
    return out


def connecting_orbit(model: SpectralModel, f: NonlinearitySpec, eps: float, T: float = 40.0,
                     h: float = 0.01, amplitude: float = 1e-4, equilibrium=None, direction: int = 0,
                     store_every: int = 1):
    """Trajectory leaving an equilibrium along an unstable direction.

    Such a trajectory stays on the attractor, so it serves as a
    near-attractor window for the regularity checks.
    """
    e = np.zeros(model.N) if equilibrium is None else np.asarray(equilibrium, float)
    dirs = unstable_directions(model, f, e, eps)
    if not dirs:
        raise ValueError("equilibrium has no unstable direction")
    rate, du, dv = dirs[direction]
    if eps > 0:
        tr = integrate(model, StatePair(e + amplitude * du, amplitude * dv, eps), f, T, h, store_every)
    else:
        tr = parabolic_integrate(model, e + amplitude * du, f, T, h, store_every)
    tr.meta.update({"kind": "connecting_orbit", "amplitude": amplitude, "growth_rate": rate})
    return tr


# -- samples ----------------------------------------------------------------

@dataclass
class AttractorSample:
    eps: float
    u: np.ndarray
    v: np.ndarray
    provenance: list
    R: float
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.u)

    def coordinates(self, model: SpectralModel, level: str = "L2") -> np.ndarray:
        """Embed (u, v) so Euclidean distance equals the product norm."""
        if level == "L2":
            wv = np.ones(model.N)
        elif level == "Hm1":
            wv = 1.0 / np.sqrt(model.lam)
        else:
            raise ValueError("level must be 'L2' or 'Hm1'")
        return np.hstack([self.u * np.sqrt(model.lam), self.v * wv])


def gamma_map(model: SpectralModel, f: NonlinearitySpec, u) -> dict:
    """Lift a parabolic field to (u, v). Both sign readings are returned."""
    fu = nemitski(f, model, u)
    displayed = model.lam * u + fu
    time_derivative = -model.lam * u + fu
    return {"u": np.asarray(u), "v_displayed": displayed, "v_time_derivative": time_derivative,
            "discrepancy": norm_H(model, displayed - time_derivative, 0)}


def _thin(u, v, model, spacing):
    """Keep points that move at least ``spacing`` in H^1_0 x L^2 from the last kept one."""
    if spacing <= 0 or len(u) < 3:
        return np.arange(len(u))
    X = np.hstack([u * np.sqrt(model.lam), v])
    keep = [0]
    for i in range(1, len(X)):
        if np.linalg.norm(X[i] - X[keep[-1]]) >= spacing:
            keep.append(i)
    if keep[-1] != len(X) - 1:
        keep.append(len(X) - 1)
    return np.array(keep)


def default_ensemble(model: SpectralModel, size: int = 32, modes: int = 4) -> np.ndarray:
    """size initial fields spanning +- amplitudes on the first ``modes`` modes."""
    per = max(1, size // (2 * modes))
    amps = np.linspace(0.5, 3.0, per)
    out = []
    for k in range(1, modes + 1):
        for a in amps:
            out.append(model.mode(k, a))
            out.append(model.mode(k, -a))
    extra = size - len(out)
    for j in range(max(0, extra)):
        # mixed low-mode data, deterministic
        c = np.zeros(model.N)
        c[: modes] = np.cos(np.arange(1, modes + 1) * (j + 1.3))
        out.append(c)
    return np.array(out[:size])


def sample_attractor(model: SpectralModel, f: NonlinearitySpec, eps: float, ensemble=None,
                     T_transient: float = 40.0, T_sample: float = 10.0, h: float = 0.01,
                     store_every: int = 1, manifold_amplitude: float = 1e-6,
                     manifold_T: float = 60.0, spacing: float = 0.0,
                     equilibria=None) -> AttractorSample:
    """Tails of an ensemble, unstable-manifold arcs of the equilibria, and the equilibria.

    For eps = 0 the parabolic flow is used and points are lifted by the
    time-derivative reading of the Gamma map.
    """
    ensemble = default_ensemble(model) if ensemble is None else np.atleast_2d(ensemble)
    equilibria = find_equilibria(model, f) if equilibria is None else equilibria
    us, vs, prov = [], [], []

    seeds_u, seeds_v, labels = [], [], []
    for e_i, e in enumerate(equilibria):
        for d_i, (rate, du, dv) in enumerate(unstable_directions(model, f, e, eps)):
            for sign in (1, -1):
                seeds_u.append(e + sign * manifold_amplitude * du)
                seeds_v.append(sign * manifold_amplitude * dv)
                labels.append(f"manifold:{e_i}:{d_i}:{'+' if sign > 0 else '-'}")
    n_ens = len(ensemble)
    u0 = np.vstack([ensemble] + ([np.array(seeds_u)] if seeds_u else []))
    v0 = np.vstack([np.zeros_like(ensemble)] + ([np.array(seeds_v)] if seeds_v else []))
    T = max(T_transient + T_sample, manifold_T if seeds_u else 0.0)
    if eps > 0:
        tr = integrate(model, StatePair(u0, v0, eps), f, T, h, store_every)
    else:
        tr = parabolic_integrate(model, u0, f, T, h, store_every)
    if tr.blown_up:
        raise RuntimeError(f"ensemble blew up at eps={eps}; dissipativeness is mis-declared")

    tail = (tr.times >= T_transient - 1e-12) & (tr.times <= T_transient + T_sample + 1e-12)
    arc = tr.times <= manifold_T + 1e-12
    for m in range(u0.shape[0]):
        sel = tail if m < n_ens else arc
        uu, vv = tr.u[sel][:, m], tr.v[sel][:, m]
        idx = _thin(uu, vv, model, spacing)
        us.append(uu[idx])
        vs.append(vv[idx])
        prov += [f"ensemble:{m}" if m < n_ens else labels[m - n_ens]] * len(idx)

    for e_i, e in enumerate(equilibria):
        us.append(e[None])
        vs.append(np.zeros((1, model.N)))
        prov.append(f"equilibrium:{e_i}")

    U, V = np.vstack(us), np.vstack(vs)
    if eps == 0:
        V = -model.lam * U + nemitski(f, model, U)
    Rv = norm_H(model, U, 1) ** 2 + eps * norm_H(model, V, 0) ** 2
    return AttractorSample(eps, U, V, prov, float(Rv.max()),
                           {"T_transient": T_transient, "T_sample": T_sample, "h": h,
                            "ensemble": len(ensemble), "equilibria": len(equilibria)})


# -- semidistance -------------------------------------------------------------

def _nearest(X: np.ndarray, Y: np.ndarray, exclude_self: bool = False) -> np.ndarray:
    """Exact nearest-neighbour distance from each row of X to the rows of Y."""
    tree = cKDTree(Y)
    if exclude_self:
        d, _ = tree.query(X, k=2)
        return d[:, 1]
    d, _ = tree.query(X)
    return d


def semidistance(model: SpectralModel, A: AttractorSample, B: AttractorSample, level: str = "L2") -> float:
    """sup over A of the distance to B in H^1_0 x L^2 (or H^1_0 x H^-1)."""
    if A.u.shape[1] != model.N or B.u.shape[1] != model.N:
        raise ValueError("samples do not belong to this spectral model")
    if len(A) == 0 or len(B) == 0:
        raise ValueError("empty sample")
    return float(_nearest(A.coordinates(model, level), B.coordinates(model, level)).max())


def sampling_density(model: SpectralModel, sample: AttractorSample, level: str = "L2") -> float:
    """Largest nearest-neighbour gap inside the cloud (isolated single points excluded)."""
    X = sample.coordinates(model, level)
    if len(X) < 2:
        return 0.0
    gaps = _nearest(X, X, exclude_self=True)
    return float(gaps.max())


@dataclass
class SemidistanceCurve:
    eps: list
    d_L2: list
    d_Hm1: list
    density: float
    rank_correlation: float
    nonincreasing: bool
    terminal_ok: bool
    dominated: bool
    robustness: list | None = None
    meta: dict = field(default_factory=dict)
    samples: dict = field(default_factory=dict, repr=False)

    @property
    def passed(self) -> bool:
        return self.nonincreasing and self.terminal_ok and self.dominated

    def to_rows(self):
        return [{"eps": e, "d_H1xL2": a, "d_H1xHm1": b} for e, a, b in zip(self.eps, self.d_L2, self.d_Hm1)]


def trend_correlation(eps_list, values) -> float:
    """Spearman correlation of the curve against the sweep order (eps decreasing)."""
    order = np.argsort(-np.asarray(eps_list, float), kind="stable")
    vals = np.asarray(values, float)[order]
    if np.ptp(vals) == 0:
        return -1.0
    return float(spearmanr(np.arange(len(vals)), vals).statistic)


def upper_semicontinuity_sweep(model: SpectralModel, f: NonlinearitySpec, eps_list,
                               trend_threshold: float = -0.9, density_factor: float = 3.0,
                               tolerance: float | None = None, robustness_check: bool = False,
                               robustness_tol: float = 0.10, **sample_kw) -> SemidistanceCurve:
    equilibria = find_equilibria(model, f)
    base = sample_attractor(model, f, 0.0, equilibria=equilibria, **sample_kw)
    density = sampling_density(model, base)
    samples = {e: sample_attractor(model, f, e, equilibria=equilibria, **sample_kw) for e in eps_list}
    dL = [semidistance(model, samples[e], base, "L2") for e in eps_list]
    dH = [semidistance(model, samples[e], base, "Hm1") for e in eps_list]
    rho_s = trend_correlation(eps_list, dL)
    rho_h = trend_correlation(eps_list, dH)
    factor = max(1.0, 1.0 / np.sqrt(model.lambda1))
    dominated = all(b <= factor * a + 1e-14 for a, b in zip(dL, dH))
    terminal = dL[int(np.argmin(eps_list))]
    limit = density_factor * density if tolerance is None else tolerance
    robustness = None
    if robustness_check:
        ens = sample_kw.pop("ensemble", None)
        ens = default_ensemble(model) if ens is None else ens
        big = np.vstack([ens, 0.9 * ens])
        base2 = sample_attractor(model, f, 0.0, ensemble=big, equilibria=equilibria, **sample_kw)
        robustness = []
        for e, d0 in zip(eps_list, dL):
            s2 = sample_attractor(model, f, e, ensemble=big, equilibria=equilibria, **sample_kw)
            d1 = semidistance(model, s2, base2, "L2")
            robustness.append({"eps": e, "d": d0, "d_doubled": d1,
                               "rel_change": abs(d1 - d0) / max(d0, 1e-300),
                               "ok": abs(d1 - d0) <= robustness_tol * max(d0, 1e-300)})
    return SemidistanceCurve(
        list(eps_list), dL, dH, density, rho_s,
        rho_s <= trend_threshold and (rho_h <= trend_threshold or max(dH) == 0),
        terminal <= limit, dominated, robustness,
        {"rank_correlation_Hm1": rho_h, "terminal": terminal, "terminal_limit": limit,
         "gamma_reading": "time-derivative (-A u + f(u))",
         "samples": {str(e): len(s) for e, s in samples.items()}, "base_points": len(base),
         "R": {str(e): s.R for e, s in samples.items()} | {"0": base.R}},
        {0.0: base, **samples},
    )
