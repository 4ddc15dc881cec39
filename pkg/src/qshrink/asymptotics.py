"""Asymptotic bias, quadratic bias and risk of the five estimators under
local alternatives beta_2 = gamma / sqrt(n).

Two risk routes are provided:

``formula="derived"`` (default)
    Writes every estimator as ``theta1 - theta3 * g(W)`` for a scalar weight
    ``g`` (0 for FM, 1 for SM, an indicator for PT, ``(p2-2)/W`` for S and
    ``min(1, (p2-2)/W)`` for PS).  With ``E[theta1 | beta2-part] = theta3 +
    delta`` and the Judge-Bock identities this gives

        Cov = tau(1-tau) G11.2^{-1} + Phi (E g^2_{+2} - 2 E g_{+2})
              + delta delta' (2 E g_{+2} - 2 E g_{+4} + E g^2_{+4}),

    where ``E h_{+m}`` is an expectation over chi2_{p2+m}(Delta).

``formula="printed"``
    An alternative closed form assembled term by term from the cross
    covariance ``Sigma_21 = -tau(1-tau) G12 G21 G11^{-1}`` and a
    pseudo-inverse of ``Phi``.  It agrees with simulation for FM and SM only
    and is kept for comparison.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from . import specfun
from .errors import DomainError, UnsupportedError
from .qr_core import GammaBlocks
from .shrinkage import ESTIMATORS, critical_value
from .specfun import NoncentralChiSq

CURVE_COLUMNS = ("delta", "estimator", "bias_norm", "qb", "risk")


@dataclass
class AsymptoticInputs:
    blocks: GammaBlocks
    tau: float
    W: Optional[np.ndarray] = None
    alpha: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise DomainError(f"tau must lie in (0, 1), got {self.tau}")
        if not 0.0 < self.alpha < 1.0:
            raise DomainError(f"alpha must lie in (0, 1), got {self.alpha}")
        p1 = self.blocks.p1
        W = np.eye(p1) if self.W is None else np.asarray(self.W, dtype=float)
        if W.shape != (p1, p1):
            raise DomainError(f"W must be {p1}x{p1}")
        if not np.allclose(W, W.T, atol=1e-10):
            raise DomainError("W must be symmetric")
        try:
            np.linalg.cholesky(W)
        except np.linalg.LinAlgError:
            raise DomainError("W must be positive definite") from None
        self.W = W

    @property
    def p1(self):
        return self.blocks.p1

    @property
    def p2(self):
        return self.blocks.p2

    @property
    def scale(self):
        return self.tau * (1.0 - self.tau)


@dataclass
class LocalAlternative:
    gamma: np.ndarray
    delta: np.ndarray
    Delta: float
    tau: float


@dataclass
class CovarianceObjects:
    """Phi = Cov(theta3) plus the Sigma12 and SigmaStar of the printed route.

    ``theta13`` is Cov(theta1, theta3) implied by the full-model normal law
    (it equals Phi); Sigma12 is only used by the ``printed`` risk route.
    """

    Phi: np.ndarray
    Sigma12: np.ndarray
    SigmaStar: np.ndarray
    theta13: np.ndarray


def covariance_objects(inputs: AsymptoticInputs) -> CovarianceObjects:
    b = inputs.blocks
    s = inputs.scale
    G11inv_G12 = np.linalg.solve(b.G11, b.G12)
    Phi = s * G11inv_G12 @ np.linalg.solve(b.G22_1, G11inv_G12.T)
    Phi = 0.5 * (Phi + Phi.T)
    G12G21G11inv = b.G12 @ b.G21 @ np.linalg.inv(b.G11)
    Sigma12 = -s * G12G21G11inv
    SigmaStar = s * (np.linalg.inv(b.G11_2) + G12G21G11inv - b.G11)
    return CovarianceObjects(Phi=Phi, Sigma12=Sigma12, SigmaStar=SigmaStar, theta13=Phi.copy())


def local_alternative(inputs: AsymptoticInputs, gamma, noncentrality: str = "wald") -> LocalAlternative:
    """delta = G11^{-1} G12 gamma and the noncentrality Delta.

    ``noncentrality="wald"`` uses gamma' G22.1 gamma / (tau(1-tau)), the law of
    the Wald statistic.  ``"printed"`` uses delta' G22.1 delta / (tau(1-tau))
    and is only defined when p1 == p2.
    """
    b = inputs.blocks
    gamma = np.asarray(gamma, dtype=float).reshape(-1)
    if gamma.size != b.p2:
        raise DomainError(f"gamma must have length p2={b.p2}")
    delta = np.linalg.solve(b.G11, b.G12 @ gamma)
    if noncentrality == "wald":
        D = float(gamma @ b.G22_1 @ gamma) / inputs.scale
    elif noncentrality == "printed":
        if b.p1 != b.p2:
            raise DomainError("the printed noncentrality needs p1 == p2")
        D = float(delta @ b.G22_1 @ delta) / inputs.scale
    else:
        raise DomainError(f"unknown noncentrality variant {noncentrality!r}")
    return LocalAlternative(gamma=gamma, delta=delta, Delta=max(D, 0.0), tau=inputs.tau)


def alternative_for_Delta(inputs: AsymptoticInputs, Delta: float, direction=None) -> LocalAlternative:
    """Scale ``direction`` (default all ones) so that the Wald noncentrality is ``Delta``."""
    if Delta < 0:
        raise DomainError("Delta must be >= 0")
    b = inputs.blocks
    u = np.ones(b.p2) if direction is None else np.asarray(direction, dtype=float)
    q = float(u @ b.G22_1 @ u)
    if q <= 0:
        raise DomainError("direction must be non-zero")
    return local_alternative(inputs, u * np.sqrt(Delta * inputs.scale / q))


def _check_estimator(name):
    if name not in ESTIMATORS:
        raise UnsupportedError(f"unknown estimator {name!r}; expected one of {ESTIMATORS}")


def _weight_moments(name: str, p2: int, Delta: float, alpha: float, shift: int):
    """(E g, E g^2) over chi2_{p2+shift}(Delta) for the estimator's weight g."""
    dist = NoncentralChiSq(p2 + shift, Delta)
    k = p2 - 2
    if name == "FM":
        return 0.0, 0.0
    if name == "SM":
        return 1.0, 1.0
    if name == "PT":
        H = specfun.cdf(dist, critical_value(p2, alpha))
        return H, H
    if p2 < 3:
        raise UnsupportedError(f"{name} needs p2 >= 3, got {p2}")
    if name == "S":
        return k * specfun.inv_moment(dist, 1), k * k * specfun.inv_moment(dist, 2)
    H = specfun.cdf(dist, k)
    e1 = specfun.truncated_inv_moment(dist, 1, k, "above")
    e2 = specfun.truncated_inv_moment(dist, 2, k, "above")
    return H + k * e1, H + k * k * e2


def bias(estimator: str, alt: LocalAlternative, inputs: AsymptoticInputs) -> np.ndarray:
    """Asymptotic bias vector (length p1)."""
    _check_estimator(estimator)
    eg, _ = _weight_moments(estimator, inputs.p2, alt.Delta, inputs.alpha, 2)
    return alt.delta * eg


def quadratic_bias(estimator: str, alt: LocalAlternative, inputs: AsymptoticInputs) -> float:
    """B' G11.2 B."""
    B = bias(estimator, alt, inputs)
    return float(B @ inputs.blocks.G11_2 @ B)


def covariance(estimator: str, alt: LocalAlternative, inputs: AsymptoticInputs) -> np.ndarray:
    """Asymptotic mean squared error matrix of sqrt(n)(b1_hat - b1) (derived route)."""
    _check_estimator(estimator)
    b = inputs.blocks
    V1 = inputs.scale * np.linalg.inv(b.G11_2)
    Phi = covariance_objects(inputs).Phi
    g2, gg2 = _weight_moments(estimator, inputs.p2, alt.Delta, inputs.alpha, 2)
    g4, gg4 = _weight_moments(estimator, inputs.p2, alt.Delta, inputs.alpha, 4)
    dd = np.outer(alt.delta, alt.delta)
    return V1 + Phi * (gg2 - 2.0 * g2) + dd * (2.0 * g2 - 2.0 * g4 + gg4)


def risk(estimator: str, alt: LocalAlternative, inputs: AsymptoticInputs, formula: str = "derived") -> float:
    """tr(W * Cov) for the chosen estimator."""
    _check_estimator(estimator)
    if formula == "derived":
        return float(np.trace(inputs.W @ covariance(estimator, alt, inputs)))
    if formula == "printed":
        return _printed_risk(estimator, alt, inputs)
    raise DomainError(f"unknown risk formula {formula!r}")


def _printed_risk(name, alt, inputs):
    b, W, s = inputs.blocks, inputs.W, inputs.scale
    p2, k, D = inputs.p2, inputs.p2 - 2, alt.Delta
    d = alt.delta
    co = covariance_objects(inputs)
    Phi, S21 = co.Phi, co.Sigma12.T
    base = s * np.trace(W @ np.linalg.inv(b.G11_2))
    dWd = float(d @ W @ d)
    if name == "FM":
        return base
    if name == "SM":
        return s * np.trace(W @ np.linalg.inv(b.G11)) + dWd
    trWS = float(np.trace(W @ S21))
    trWP = float(np.trace(W @ Phi))
    trWddPS = float(np.trace(W @ np.outer(d, d) @ np.linalg.pinv(Phi) @ S21)) if np.any(d) else 0.0
    X2, X4 = NoncentralChiSq(p2 + 2, D), NoncentralChiSq(p2 + 4, D)
    if name == "PT":
        c = critical_value(p2, inputs.alpha)
        H2, H4 = specfun.cdf(X2, c), specfun.cdf(X4, c)
        return base - 2 * trWS * H2 + trWddPS * (H2 - 2 * H4) + trWP * H2 + dWd * H4
    if p2 < 3:
        raise UnsupportedError(f"{name} needs p2 >= 3, got {p2}")
    E2_1, E4_1 = specfun.inv_moment(X2, 1), specfun.inv_moment(X4, 1)
    E2_2, E4_2 = specfun.inv_moment(X2, 2), specfun.inv_moment(X4, 2)
    r_s = base - 2 * k * trWS * E2_1 - 2 * k * trWddPS * (E4_1 + E2_1) + k * k * (trWP * E2_2 + dWd * E4_2)
    if name == "S":
        return r_s
    # E{(1 - k chi^-2) I(chi^2 <= k)} is read on a single chi2_{p2+2} variable
    t1 = specfun.cdf(X2, k) - k * specfun.truncated_inv_moment(X2, 1, k, "below")
    t2 = 1.0 - k * specfun.truncated_inv_moment(X4, 1, k, "below")
    t3 = 1.0 - k * specfun.truncated_inv_moment(X2, 1, k, "below")
    t4 = specfun.truncated_inv_moment(X2, 2, k, "below")
    return (
        r_s
        - 2 * trWS * t1
        - 2 * trWddPS * t2
        - 2 * trWddPS * t3
        - k * k * (trWP + dWd) * t4
        + trWP * specfun.cdf(X2, k)
        + dWd * specfun.cdf(X4, k)
    )


def curves(
    inputs: AsymptoticInputs,
    delta_grid: Iterable[float],
    estimators: Iterable[str] = ESTIMATORS,
    direction=None,
    formula: str = "derived",
) -> list[dict]:
    """Sweep the noncentrality grid; one row per (Delta, estimator)."""
    grid = [float(x) for x in delta_grid]
    if not grid:
        raise DomainError("delta grid is empty")
    if any(x < 0 for x in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
        raise DomainError("delta grid must be nonnegative and strictly increasing")
    names = [e for e in estimators if not (e in ("S", "PS") and inputs.p2 < 3)]
    rows = []
    for D in grid:
        alt = alternative_for_Delta(inputs, D, direction)
        for name in names:
            B = bias(name, alt, inputs)
            rows.append(
                {
                    "delta": D,
                    "estimator": name,
                    "bias_norm": float(np.linalg.norm(B)),
                    "qb": float(B @ inputs.blocks.G11_2 @ B),
                    "risk": risk(name, alt, inputs, formula),
                }
            )
    return rows
