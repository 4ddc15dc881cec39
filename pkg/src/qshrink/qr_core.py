"""Check-loss quantile regression and the sandwich covariance objects.

The solver runs a majorize-minimize (iteratively reweighted least squares)
pass on the smoothed check loss to get close to the optimum, then moves to an
exact vertex of the underlying linear program with simplex-style pivots.  A
vertex is accepted only once its dual multipliers certify optimality.  If the
pivoting stalls (degenerate data), HiGHS is used as a last resort.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg, optimize, stats

from .errors import (
    ConvergenceError,
    DomainError,
    SingularBlockError,
    SingularDesignError,
)

TAU_MIN, TAU_MAX = 0.01, 0.99
TOL_KKT = 1e-4
MAX_ITER = 500
EPS_FINAL = 1e-8
MAX_COND = 1e10


def check_loss(u, tau):
    """rho_tau(u) = u * (tau - I(u < 0)), elementwise."""
    u = np.asarray(u, dtype=float)
    return u * (tau - (u < 0))


def objective(X, y, beta, tau):
    return float(np.sum(check_loss(y - X @ beta, tau)))


def validate_tau(tau):
    tau = float(tau)
    if not (TAU_MIN <= tau <= TAU_MAX):
        raise DomainError(f"tau must lie in [{TAU_MIN}, {TAU_MAX}], got {tau}")
    return tau


@dataclass
class Dataset:
    """Response ``y`` and design ``X = [X1 | X2]`` with ``p1`` leading columns."""

    y: np.ndarray
    X: np.ndarray
    p1: Optional[int] = None
    feature_names: Optional[list] = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if y.ndim != 1:
            y = y.reshape(-1)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise DomainError(f"shape mismatch: X {X.shape} vs y {y.shape}")
        n, p = X.shape
        if p < 1:
            raise DomainError("design needs at least one column")
        if n < p:
            raise DomainError(f"need n >= p, got n={n}, p={p}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise DomainError("data contain non-finite entries")
        p1 = p if self.p1 is None else int(self.p1)
        if not 1 <= p1 <= p:
            raise DomainError(f"p1 must be in [1, {p}], got {p1}")
        if self.feature_names is not None and len(self.feature_names) != p:
            raise DomainError("feature_names length does not match the number of columns")
        self.y, self.X, self.p1 = y, X, p1

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    @property
    def p2(self):
        return self.p - self.p1

    @property
    def X1(self):
        return self.X[:, : self.p1]

    @property
    def X2(self):
        return self.X[:, self.p1 :]

    @classmethod
    def from_partition(cls, y, X, sub_columns: Sequence[int], feature_names=None):
        """Reorder columns so that ``sub_columns`` form the leading block."""
        X = np.asarray(X, dtype=float)
        sub = [int(j) for j in sub_columns]
        if len(set(sub)) != len(sub) or any(j < 0 or j >= X.shape[1] for j in sub):
            raise DomainError(f"invalid sub-model columns {sub_columns!r}")
        rest = [j for j in range(X.shape[1]) if j not in sub]
        order = sub + rest
        names = None if feature_names is None else [feature_names[j] for j in order]
        return cls(y, X[:, order], p1=len(sub), feature_names=names)

    def subset(self, rows):
        return Dataset(self.y[rows], self.X[rows], self.p1, self.feature_names)


@dataclass
class QuantileFit:
    tau: float
    beta: np.ndarray
    residuals: np.ndarray
    objective: float
    D0: np.ndarray
    D1: np.ndarray
    Gamma: np.ndarray
    cov: np.ndarray
    n: int
    p1: int
    bandwidth: float
    degenerate: bool = False
    iterations: dict = field(default_factory=dict)

    def padded(self, p):
        """Coefficients extended with zeros to length ``p``."""
        out = np.zeros(p)
        out[: self.beta.size] = self.beta
        return out


@dataclass
class GammaBlocks:
    G11: np.ndarray
    G12: np.ndarray
    G21: np.ndarray
    G22: np.ndarray
    G22_1: np.ndarray
    G11_2: np.ndarray

    @property
    def p1(self):
        return self.G11.shape[0]

    @property
    def p2(self):
        return self.G22.shape[0]

    @property
    def full(self):
        return np.block([[self.G11, self.G12], [self.G21, self.G22]])

    @classmethod
    def from_matrix(cls, Gamma, p1):
        G = np.asarray(Gamma, dtype=float)
        if G.ndim != 2 or G.shape[0] != G.shape[1]:
            raise DomainError("Gamma must be square")
        p = G.shape[0]
        if not 1 <= p1 < p:
            raise DomainError(f"need 1 <= p1 < p, got p1={p1}, p={p}")
        if not np.allclose(G, G.T, atol=1e-8 * max(1.0, np.abs(G).max())):
            raise SingularBlockError("Gamma is not symmetric")
        G = 0.5 * (G + G.T)
        G11, G12 = G[:p1, :p1], G[:p1, p1:]
        G21, G22 = G[p1:, :p1], G[p1:, p1:]
        c11 = _chol(G11, "Gamma_11")
        c22 = _chol(G22, "Gamma_22")
        G22_1 = G22 - G21 @ linalg.cho_solve(c11, G12)
        G11_2 = G11 - G12 @ linalg.cho_solve(c22, G21)
        G22_1 = 0.5 * (G22_1 + G22_1.T)
        G11_2 = 0.5 * (G11_2 + G11_2.T)
        _chol(G22_1, "Gamma_22.1")
        _chol(G11_2, "Gamma_11.2")
        return cls(G11, G12, G21, G22, G22_1, G11_2)


def _chol(A, name):
    try:
        return linalg.cho_factor(A, lower=True)
    except linalg.LinAlgError:
        raise SingularBlockError(f"{name} is not positive definite") from None


# ---------------------------------------------------------------- solver ---


def _check_design(X):
    s = np.linalg.svd(X, compute_uv=False)
    if s[-1] <= 0 or s[0] / s[-1] > MAX_COND:
        cond = math.inf if s[-1] <= 0 else s[0] / s[-1]
        raise SingularDesignError(f"design is rank deficient (condition number {cond:.3g})")


def _irls(X, y, tau, beta, max_iter, trace):
    """Majorize-minimize on the perturbed check loss, eps shrinking to EPS_FINAL."""
    r = y - X @ beta
    scale = max(float(np.mean(np.abs(r))), 1e-12)
    eps = 1e-2 * scale
    shift = (2.0 * tau - 1.0) * X.sum(axis=0)
    best_obj = float(np.sum(check_loss(r, tau)))
    best = beta.copy()
    it = 0
    while it < max_iter:
        it += 1
        w = 1.0 / (eps + np.abs(r))
        A = X.T @ (w[:, None] * X)
        b = X.T @ (w * y) + shift
        try:
            with warnings.catch_warnings():
                # the weights blow up as eps shrinks; the pivot step certifies the result
                warnings.simplefilter("ignore", linalg.LinAlgWarning)
                beta = linalg.solve(A, b, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            break
        r = y - X @ beta
        obj = float(np.sum(check_loss(r, tau)))
        if obj <= best_obj:
            rel = (best_obj - obj) / (1.0 + best_obj)
            best_obj, best = obj, beta.copy()
            trace.append(obj)
            if rel < 1e-6:
                if eps <= EPS_FINAL * scale:
                    break
                eps *= 0.1
        else:
            if eps <= EPS_FINAL * scale:
                break
            eps *= 0.1
        eps = max(eps, EPS_FINAL * scale)
    return best, it


def _initial_basis(X, r):
    """Greedy full-rank basis from the smallest absolute residuals."""
    p = X.shape[1]
    order = np.argsort(np.abs(r), kind="stable")
    basis = []
    Q = np.zeros((p, 0))
    for i in order:
        v = X[i] - Q @ (Q.T @ X[i])
        nv = np.linalg.norm(v)
        if nv > 1e-10 * max(1.0, np.linalg.norm(X[i])):
            Q = np.column_stack([Q, v / nv])
            basis.append(int(i))
            if len(basis) == p:
                break
    return basis


def _pivot(X, y, tau, basis, max_pivots, tol=1e-11):
    """Simplex pivots between vertices until the dual multipliers are feasible.

    Returns ``(beta, basis, pivots, certified)``.
    """
    n, p = X.shape
    basis = list(basis)
    XB = X[basis]
    beta = np.linalg.solve(XB, y[basis])
    pivots = 0
    while True:
        r = y - X @ beta
        inB = np.zeros(n, dtype=bool)
        inB[basis] = True
        r[basis] = 0.0
        psi = tau - (r < 0)
        psi[basis] = 0.0
        # X_B' v = -X_N' psi_N
        v = np.linalg.solve(XB.T, -(X.T @ psi))
        upper = v - tau
        lower = (tau - 1.0) - v
        viol = np.maximum(upper, lower)
        k = int(np.argmax(viol))
        if viol[k] <= tol:
            return beta, basis, pivots, True
        if pivots >= max_pivots:
            return beta, basis, pivots, False
        s = 1.0 if upper[k] > lower[k] else -1.0
        e = np.zeros(p)
        e[k] = -s
        d = np.linalg.solve(XB, e)
        a = X @ d
        a[basis] = 0.0
        nb = ~inB
        # residual of nonbasic i along the ray: r_i - t * a_i
        zero = nb & (r == 0.0)
        psi_plus = psi.copy()
        psi_plus[zero] = tau - (a[zero] > 0)
        g = -float(psi_plus[nb] @ a[nb]) + (tau if s > 0 else 1.0 - tau)
        cand = nb & (a != 0.0) & (r != 0.0)
        t = np.full(n, np.inf)
        t[cand] = r[cand] / a[cand]
        cand &= t > 0
        idx = np.flatnonzero(cand)
        if idx.size == 0:
            return beta, basis, pivots, False
        order = idx[np.argsort(t[idx], kind="stable")]
        slopes = g + np.cumsum(np.abs(a[order]))
        hit = np.flatnonzero(slopes >= 0)
        if hit.size == 0:
            return beta, basis, pivots, False
        enter = int(order[hit[0]])
        beta = beta + t[enter] * d
        basis[k] = enter
        XB = X[basis]
        pivots += 1


def _highs(X, y, tau):
    n, p = X.shape
    c = np.concatenate([np.zeros(p), np.full(n, tau), np.full(n, 1.0 - tau)])
    A = np.hstack([X, np.eye(n), -np.eye(n)])
    bounds = [(None, None)] * p + [(0, None)] * (2 * n)
    res = optimize.linprog(c, A_eq=A, b_eq=y, bounds=bounds, method="highs")
    if res.status != 0:
        raise ConvergenceError(f"HiGHS failed: {res.message}")
    return res.x[:p]


def solve_check_loss(X, y, tau, beta0=None, max_iter=MAX_ITER):
    """Minimize sum rho_tau(y - X beta).  Returns ``(beta, info)``."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    trace = []
    if beta0 is None:
        beta0 = np.linalg.lstsq(X, y, rcond=None)[0]
    beta, irls_iters = _irls(X, y, tau, np.asarray(beta0, dtype=float), max_iter, trace)
    irls_obj = objective(X, y, beta, tau)
    basis = _initial_basis(X, y - X @ beta)
    info = {"irls_iterations": irls_iters, "pivots": 0, "method": "mm+pivot", "trace": trace}
    if len(basis) == p:
        try:
            vbeta, basis, pivots, certified = _pivot(X, y, tau, basis, max_pivots=max(50, 10 * p))
        except np.linalg.LinAlgError:
            # numerically singular vertex; let the LP solver settle it
            vbeta, pivots, certified = beta, 0, False
        info["pivots"] = pivots
        vobj = objective(X, y, vbeta, tau)
        if certified and vobj <= irls_obj + 1e-8 * (1.0 + abs(irls_obj)):
            trace.append(vobj)
            info.update(certified=True, basis=basis)
            return vbeta, info
    try:
        hbeta = _highs(X, y, tau)
    except ConvergenceError as exc:
        exc.best = beta
        raise
    trace.append(objective(X, y, hbeta, tau))
    info.update(method="highs", certified=True)
    return hbeta, info


# --------------------------------------------------- covariance objects ---


def hall_sheather(n, tau, level=0.05):
    """Hall-Sheather bandwidth on the probability scale."""
    z = stats.norm.ppf(1.0 - level / 2.0)
    q = stats.norm.ppf(tau)
    return n ** (-1.0 / 3.0) * z ** (2.0 / 3.0) * (1.5 * stats.norm.pdf(q) ** 2 / (2.0 * q**2 + 1.0)) ** (1.0 / 3.0)


def residual_bandwidth(residuals, tau, scale=None):
    """Hall-Sheather bandwidth mapped to residual units via the residual IQR.

    ``scale`` overrides the IQR-based residual scale.
    """
    n = residuals.size
    h = hall_sheather(n, tau)
    h = min(h, 0.999 * min(tau, 1.0 - tau))
    if scale is None:
        q75, q25 = np.percentile(residuals, [75, 25])
        scale = (q75 - q25) / (stats.norm.ppf(0.75) - stats.norm.ppf(0.25))
    return float(scale * (stats.norm.ppf(tau + h) - stats.norm.ppf(tau - h)))


def estimate_sparsity(fit_or_residuals, data_or_X, method="powell_kernel", bandwidth="hall-sheather", tau=None):
    """Powell kernel estimate of D1 = (1/n) sum f_i(xi_i) x_i x_i'.

    Returns ``(D1, bandwidth, degenerate)``.  A non positive definite estimate
    is repaired by adding ``1e-8 * trace / p`` to the diagonal and flagged.
    """
    if method != "powell_kernel":
        raise DomainError(f"unknown sparsity method {method!r}")
    if isinstance(fit_or_residuals, QuantileFit):
        r = fit_or_residuals.residuals
        tau = fit_or_residuals.tau
    else:
        r = np.asarray(fit_or_residuals, dtype=float)
    X = data_or_X.X if isinstance(data_or_X, Dataset) else np.asarray(data_or_X, dtype=float)
    if X.shape[1] != 0 and isinstance(fit_or_residuals, QuantileFit) and fit_or_residuals.beta.size != X.shape[1]:
        X = X[:, : fit_or_residuals.beta.size]
    n, p = X.shape
    if isinstance(bandwidth, str):
        if bandwidth != "hall-sheather":
            raise DomainError(f"unknown bandwidth rule {bandwidth!r}")
        if tau is None:
            raise DomainError("tau is needed for the Hall-Sheather rule")
        h = residual_bandwidth(r, tau)
        degenerate = not h > 0
        if degenerate:
            # (near) exact fit: the residual IQR vanishes, so fall back to the
            # residual RMS (or unit scale when every residual is zero)
            rms = float(np.sqrt(np.mean(r**2)))
            h = residual_bandwidth(r, tau, scale=rms if rms > 0 else 1.0)
    else:
        h = float(bandwidth)
        degenerate = False
    if not (h > 0 and math.isfinite(h)):
        raise DomainError(f"bandwidth must be positive, got {h}")
    inside = np.abs(r) <= h
    Xi = X[inside]
    D1 = (Xi.T @ Xi) / (2.0 * h * n)
    D1 = 0.5 * (D1 + D1.T)
    try:
        np.linalg.cholesky(D1)
    except np.linalg.LinAlgError:
        degenerate = True
        tr = np.trace(D1)
        if tr <= 0:
            tr = np.trace(X.T @ X) / n
        D1 = D1 + (1e-8 * tr / p) * np.eye(p)
    return D1, h, degenerate


def _build_fit(X, y, tau, beta, info, p1, bandwidth="hall-sheather"):
    n, p = X.shape
    r = y - X @ beta
    D0 = (X.T @ X) / n
    D1, h, degenerate = estimate_sparsity(r, X, bandwidth=bandwidth, tau=tau)
    Gamma = D1 @ np.linalg.solve(D0, D1)
    Gamma = 0.5 * (Gamma + Gamma.T)
    D1inv = np.linalg.inv(D1)
    cov = tau * (1.0 - tau) * (D1inv @ D0 @ D1inv) / n
    cov = 0.5 * (cov + cov.T)
    return QuantileFit(
        tau=tau,
        beta=beta,
        residuals=r,
        objective=float(np.sum(check_loss(r, tau))),
        D0=D0,
        D1=D1,
        Gamma=Gamma,
        cov=cov,
        n=n,
        p1=min(p1, p),
        bandwidth=h,
        degenerate=degenerate,
        iterations=info,
    )


def fit_full(data: Dataset, tau: float, bandwidth="hall-sheather") -> QuantileFit:
    """Full-model quantile regression on all ``p`` columns."""
    tau = validate_tau(tau)
    _check_design(data.X)
    beta, info = solve_check_loss(data.X, data.y, tau)
    return _build_fit(data.X, data.y, tau, beta, info, data.p1, bandwidth)


def fit_sub(data: Dataset, tau: float, bandwidth="hall-sheather") -> QuantileFit:
    """Restricted fit on the leading ``p1`` columns (beta_2 = 0)."""
    if data.p2 < 1:
        raise DomainError("sub-model fit needs p2 >= 1")
    tau = validate_tau(tau)
    X1 = data.X1
    _check_design(X1)
    beta, info = solve_check_loss(X1, data.y, tau)
    return _build_fit(X1, data.y, tau, beta, info, data.p1, bandwidth)


def gamma_blocks(fit: QuantileFit, p1: Optional[int] = None) -> GammaBlocks:
    """Partition the fitted Gamma = D1 D0^{-1} D1 and form its Schur complements."""
    return GammaBlocks.from_matrix(fit.Gamma, fit.p1 if p1 is None else p1)


def submodel_projection(full: QuantileFit, blocks: GammaBlocks) -> np.ndarray:
    """beta1_FM + Gamma11^{-1} Gamma12 beta2_FM, the linear stand-in for the
    restricted estimator used in the asymptotic derivations."""
    p1 = blocks.p1
    b1, b2 = full.beta[:p1], full.beta[p1:]
    return b1 + np.linalg.solve(blocks.G11, blocks.G12 @ b2)


def kkt_residual(X, y, beta, tau, tol_active=None):
    """Scaled subgradient residual per column.

    Finds multipliers ``v_i in [tau-1, tau]`` for the (near) zero residuals
    that best close ``sum_i x_i psi_tau(r_i) = 0`` and returns
    ``|residual_j| / max(1, ||x_j||_1)``.  Optimal fits give values near 0.
    """
    X = np.asarray(X, dtype=float)
    r = np.asarray(y, dtype=float) - X @ beta
    n, p = X.shape
    if tol_active is None:
        tol_active = 1e-9 * max(1.0, float(np.max(np.abs(y))))
    active = np.abs(r) <= tol_active
    psi = tau - (r < 0)
    g = X[~active].T @ psi[~active]
    if active.any():
        XA = X[active].T
        res = optimize.lsq_linear(XA, -g, bounds=(tau - 1.0, tau), method="bvls")
        g = g + XA @ res.x
    scale = np.maximum(1.0, np.abs(X).sum(axis=0))
    return np.abs(g) / scale
