"""Elliptic operator assembly, eigendecomposition and the fractional norm ladder.

Fields are represented by their coefficient vectors in the retained
eigenbasis, so every norm below is a closed-form weighted sum.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

EIG_RESIDUAL_TOL = 1e-8
ORTHO_TOL = 1e-10
DENSE_LIMIT = 2500


class OperatorError(ValueError):
    """Raised when the coefficients violate the structural hypotheses."""

    def __init__(self, message, clause=None, location=None, value=None):
        super().__init__(message)
        self.clause = clause
        self.location = location
        self.value = value


@dataclass(frozen=True)
class DomainSpec:
    dimension: int
    lengths: tuple[float, ...]
    grid_n: int
    modes_N: int

    def __post_init__(self):
        if self.dimension not in (1, 2):
            raise ValueError("dimension must be 1 or 2")
        if len(self.lengths) != self.dimension:
            raise ValueError("need one length per axis")
        if any(L <= 0 for L in self.lengths):
            raise ValueError("extents must be strictly positive")
        if self.modes_N < 1:
            raise ValueError("modes_N must be >= 1")
        if self.grid_n < 4 * np.sqrt(self.modes_N):
            raise ValueError(
                f"grid_n={self.grid_n} too coarse for N={self.modes_N} (need >= 4*sqrt(N))"
            )

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(L / (self.grid_n + 1) for L in self.lengths)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.grid_n,) * self.dimension

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def coordinates(self) -> list[np.ndarray]:
        axes = [np.arange(1, self.grid_n + 1) * h for h in self.spacing]
        return list(np.meshgrid(*axes, indexing="ij"))


@dataclass(frozen=True)
class CoefficientField:
    """Diffusion tensor ``a`` (shape grid+(d,d)) and potential ``beta`` (shape grid)."""

    a: np.ndarray
    beta: np.ndarray

    @classmethod
    def constant(cls, domain: DomainSpec, a=1.0, beta=0.0) -> "CoefficientField":
        d = domain.dimension
        a_arr = np.asarray(a, dtype=float)
        if a_arr.ndim == 0:
            a_arr = a_arr * np.eye(d)
        tensor = np.broadcast_to(a_arr, domain.shape + (d, d)).copy()
        return cls(tensor, np.full(domain.shape, float(beta)))

    def ellipticity_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        eig = np.linalg.eigvalsh(self.a)
        return eig[..., 0], eig[..., -1]


def check_ellipticity(coeffs: CoefficientField, a0: float, a1: float) -> None:
    a = coeffs.a
    if not np.allclose(a, np.swapaxes(a, -1, -2)):
        idx = np.argwhere(~np.isclose(a, np.swapaxes(a, -1, -2)).all(axis=(-1, -2)))[0]
        raise OperatorError(
            f"coefficient tensor not symmetric at grid point {tuple(idx)}",
            clause="Hyp1(1)", location=tuple(int(i) for i in idx),
        )
    lo, hi = coeffs.ellipticity_bounds()
    bad = (lo < a0) | (hi > a1)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise OperatorError(
            f"ellipticity violated at grid point {idx}: eigenvalues "
            f"[{lo[idx]:.6g}, {hi[idx]:.6g}] not within [{a0}, {a1}]",
            clause="Hyp1(1)", location=idx, value=(float(lo[idx]), float(hi[idx])),
        )


def _staggered_difference(n: int, h: float) -> sp.csr_matrix:
    """Fourth-order difference from nodes to the n+1 midpoints.

    Homogeneous Dirichlet data is imposed by odd reflection, which keeps
    sine modes exact eigenvectors of D^T D.
    """
    rows, cols, vals = [], [], []

    def add(r, node, w):
        # node index in 0..n+1 (0 and n+1 are boundary), reflected ghosts beyond
        if node == 0 or node == n + 1:
            return
        if node == -1:
            node, w = 1, -w
        elif node == n + 2:
            node, w = n, -w
        rows.append(r)
        cols.append(node - 1)
        vals.append(w)

    for m in range(n + 1):
        add(m, m + 1, 27.0)
        add(m, m, -27.0)
        add(m, m + 2, -1.0)
        add(m, m - 1, 1.0)
    D = sp.coo_matrix((vals, (rows, cols)), shape=(n + 1, n)).tocsr()
    return D / (24.0 * h)


def _midpoint_average(values: np.ndarray, axis: int) -> np.ndarray:
    first = np.take(values, [0], axis=axis)
    last = np.take(values, [-1], axis=axis)
    ext = np.concatenate([first, values, last], axis=axis)
    lo = np.take(ext, range(0, ext.shape[axis] - 1), axis=axis)
    hi = np.take(ext, range(1, ext.shape[axis]), axis=axis)
    return 0.5 * (lo + hi)


def assemble_operator(domain: DomainSpec, coeffs: CoefficientField,
                      a0: float | None = None, a1: float | None = None) -> sp.csr_matrix:
    """Symmetric matrix of ``beta u - div(a grad u)`` on interior grid nodes.

    The matrix acts with respect to the cell-weighted L2 product, i.e. the
    discrete quadratic form is ``cell_volume * u @ A @ u``.
    """
    lo, hi = coeffs.ellipticity_bounds()
    a0 = float(lo.min()) if a0 is None else a0
    a1 = float(hi.max()) if a1 is None else a1
    if a0 <= 0:
        idx = tuple(int(i) for i in np.unravel_index(np.argmin(lo), lo.shape))
        raise OperatorError(f"ellipticity constant a0 must be positive; smallest value "
                            f"{lo[idx]:.6g} at grid point {idx}",
                            clause="Hyp1(1)", location=idx, value=float(lo[idx]))
    check_ellipticity(coeffs, a0, a1)

    n = domain.grid_n
    hs = domain.spacing
    if domain.dimension == 1:
        D = _staggered_difference(n, hs[0])
        a_mid = _midpoint_average(coeffs.a[:, 0, 0], 0)
        A = D.T @ sp.diags(a_mid) @ D
    else:
        I = sp.identity(n, format="csr")
        Dx = sp.kron(_staggered_difference(n, hs[0]), I, format="csr")
        Dy = sp.kron(I, _staggered_difference(n, hs[1]), format="csr")
        axx = _midpoint_average(coeffs.a[..., 0, 0], 0).ravel()
        ayy = _midpoint_average(coeffs.a[..., 1, 1], 1).ravel()
        A = Dx.T @ sp.diags(axx) @ Dx + Dy.T @ sp.diags(ayy) @ Dy
        a_xy = coeffs.a[..., 0, 1]
        if np.any(a_xy != 0):
            A = A + _cross_term(n, hs, a_xy)
    A = (A + sp.diags(coeffs.beta.ravel())).tocsr()
    A = 0.5 * (A + A.T)

    lam_min = _smallest_eigenvalue(A)
    if lam_min <= 0:
        raise OperatorError(
            f"smallest Ritz value {lam_min:.6g} is not positive",
            clause="Hyp1(2b)", value=float(lam_min),
        )
    return A.tocsr()


def _cross_term(n, hs, a_xy):
    # cell-centred gradients: energy term 2 a_xy u_x u_y per cell, boundary cells included
    hx, hy = hs
    cells = (n + 1) ** 2

    def cell_diff(axis):
        rows, cols, vals = [], [], []
        for i in range(n + 1):
            for j in range(n + 1):
                r = i * (n + 1) + j
                corners = [(i, j), (i + 1, j), (i, j + 1), (i + 1, j + 1)]
                for (p, q) in corners:
                    if not (1 <= p <= n and 1 <= q <= n):
                        continue
                    sign = (1 if (p == i + 1) else -1) if axis == 0 else (1 if (q == j + 1) else -1)
                    h = hx if axis == 0 else hy
                    rows.append(r)
                    cols.append((p - 1) * n + (q - 1))
                    vals.append(0.5 * sign / h)
        return sp.coo_matrix((vals, (rows, cols)), shape=(cells, n * n)).tocsr()

    Gx, Gy = cell_diff(0), cell_diff(1)
    a_pad = np.pad(a_xy, 1, mode="edge")
    a_cell = 0.25 * (a_pad[:-1, :-1] + a_pad[1:, :-1] + a_pad[:-1, 1:] + a_pad[1:, 1:]).ravel()
    W = sp.diags(a_cell)
    return Gx.T @ W @ Gy + Gy.T @ W @ Gx


def _smallest_eigenvalue(A: sp.spmatrix) -> float:
    if A.shape[0] <= DENSE_LIMIT:
        return float(scipy.linalg.eigh(A.toarray(), eigvals_only=True, subset_by_index=[0, 0])[0])
    val = spla.eigsh(A, k=1, sigma=0, which="LM", return_eigenvectors=False)
    return float(val[0])


@dataclass(frozen=True, eq=False)
class SpectralModel:
    """Retained eigenpairs of the elliptic operator.

    ``phi`` holds grid values with shape (n_points, N), normalised so that
    ``cell_volume * phi.T @ phi`` is the identity.
    """

    domain: DomainSpec
    lam: np.ndarray
    phi: np.ndarray
    cell_volume: float
    residuals: np.ndarray
    points: list = field(default_factory=list, repr=False)
    a0: float = 1.0
    beta_min: float = 0.0

    @property
    def N(self) -> int:
        return self.lam.size

    @property
    def lambda1(self) -> float:
        return float(self.lam[0])

    def to_grid(self, c: np.ndarray) -> np.ndarray:
        return np.asarray(c) @ self.phi.T

    def project(self, g: np.ndarray) -> np.ndarray:
        return self.cell_volume * (np.asarray(g) @ self.phi)

    def integrate(self, g: np.ndarray) -> np.ndarray:
        return self.cell_volume * np.sum(g, axis=-1)

    def mode(self, k: int, amplitude: float = 1.0) -> np.ndarray:
        c = np.zeros(self.N)
        c[k - 1] = amplitude
        return c

    def orthonormality_error(self) -> float:
        G = self.cell_volume * self.phi.T @ self.phi
        return float(np.abs(G - np.eye(self.N)).max())

    def with_lambda(self, lam: np.ndarray) -> "SpectralModel":
        return SpectralModel(self.domain, np.asarray(lam, float), self.phi,
                             self.cell_volume, self.residuals, self.points,
                             self.a0, self.beta_min)


def eig_decompose(A: sp.spmatrix, N: int, domain: DomainSpec,
                  a0: float = 1.0, beta_min: float = 0.0) -> SpectralModel:
    size = A.shape[0]
    if N > size:
        raise ValueError(f"N={N} exceeds grid dimension {size}")
    if size <= DENSE_LIMIT:
        lam, vec = scipy.linalg.eigh(A.toarray(), subset_by_index=[0, N - 1])
    else:
        try:
            lam, vec = spla.eigsh(A, k=N, sigma=0, which="LM", tol=1e-12)
        except spla.ArpackNoConvergence as exc:
            raise RuntimeError("eigensolver failed to converge") from exc
        order = np.argsort(lam)
        lam, vec = lam[order], vec[:, order]
    # sign convention: first nonzero entry positive, for reproducible coefficients
    for k in range(N):
        j = np.argmax(np.abs(vec[:, k]) > 1e-8 * np.abs(vec[:, k]).max())
        if vec[j, k] < 0:
            vec[:, k] = -vec[:, k]
    vol = domain.cell_volume
    phi = vec / np.sqrt(vol)
    res_vec = A @ phi - phi * lam
    residuals = np.sqrt(vol * np.sum(res_vec**2, axis=0))
    model = SpectralModel(domain, lam, phi, vol, residuals, domain.coordinates(), a0, beta_min)
    if lam[0] <= 0:
        raise OperatorError(f"lambda_1 = {lam[0]:.6g} not positive", clause="Hyp1(2b)")
    if np.any(residuals > EIG_RESIDUAL_TOL * np.maximum(lam, 1.0)):
        raise RuntimeError(f"eigen-residual too large: {residuals.max():.3g}")
    if model.orthonormality_error() > ORTHO_TOL:
        raise RuntimeError("eigenvectors not orthonormal")
    log.debug("eigendecomposition: N=%d lambda_1=%.8g lambda_N=%.6g", N, lam[0], lam[-1])
    return model


def build_model(domain: DomainSpec, coeffs: CoefficientField | None = None, **kw) -> SpectralModel:
    coeffs = coeffs or CoefficientField.constant(domain)
    A = assemble_operator(domain, coeffs, **kw)
    a0 = kw.get("a0") or float(coeffs.ellipticity_bounds()[0].min())
    return eig_decompose(A, domain.modes_N, domain, a0, float(coeffs.beta.min()))


# -- norm ladder -----------------------------------------------------------

def norm_H(model: SpectralModel, c, kappa: float) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    return np.sqrt(np.sum(model.lam**kappa * c**2, axis=-1))


def norm_H_theta(model: SpectralModel, c, kappa: int, theta: float) -> np.ndarray:
    if kappa not in (1, -1, 0):
        raise ValueError("shifted norms exist for kappa in {1, 0, -1}")
    if theta < 0:
        raise ValueError("theta must be nonnegative")
    c = np.asarray(c, dtype=float)
    return np.sqrt(np.sum((model.lam + theta) ** kappa * c**2, axis=-1))


def inner_H(model: SpectralModel, c1, c2, kappa: float) -> np.ndarray:
    return np.sum(model.lam**kappa * np.asarray(c1) * np.asarray(c2), axis=-1)


@dataclass
class ShiftReport:
    theta: float
    samples: int
    passed: bool
    tightest: dict
    violations: list


def check_shift_inequalities(model: SpectralModel, theta: float, fields: np.ndarray,
                             tol: float = 1e-12) -> ShiftReport:
    """Check the four shifted-norm comparison inequalities on every sample.

    ``tightest`` maps each inequality to (min slack ratio, sample index);
    a ratio of 1 means equality.
    """
    if theta < 0:
        raise ValueError("theta must be nonnegative")
    fields = np.atleast_2d(np.asarray(fields, dtype=float))
    lam1 = model.lambda1
    k = lam1 / (theta + lam1)
    h1 = norm_H(model, fields, 1) ** 2
    h1t = norm_H_theta(model, fields, 1, theta) ** 2
    hm1 = norm_H(model, fields, -1) ** 2
    hm1t = norm_H_theta(model, fields, -1, theta) ** 2
    l2 = norm_H(model, fields, 0) ** 2

    # (lhs, rhs) pairs meaning lhs <= rhs
    checks = {
        "h1_shift_lower": (k * h1t, h1),
        "h1_shift_upper": (h1, h1t),
        "hm1_shift_lower": (k * hm1, hm1t),
        "hm1_shift_upper": (hm1t, hm1),
        "h1_shift_poincare": ((lam1 + theta) * l2, h1t),
        "hm1_shift_poincare": ((lam1 + theta) * hm1t, l2),
    }
    tightest, violations = {}, []
    for name, (lhs, rhs) in checks.items():
        margin = rhs - lhs
        scale = np.maximum(np.abs(rhs), 1e-300)
        bad = np.flatnonzero(margin < -tol * scale)
        for i in bad:
            violations.append({"inequality": name, "field": int(i), "margin": float(margin[i])})
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.where(rhs > 0, lhs / scale, 0.0)
        i = int(np.argmax(ratio))
        tightest[name] = (float(ratio[i]), i)
    return ShiftReport(theta, len(fields), not violations, tightest, violations)


def random_fields(model: SpectralModel, count: int, rng: np.random.Generator,
                  decay: float = 1.0) -> np.ndarray:
    """Random coefficient vectors with k^-decay amplitude envelope."""
    k = np.arange(1, model.N + 1)
    return rng.standard_normal((count, model.N)) * k ** (-decay)
