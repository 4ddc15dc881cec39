"""Non-central chi-square functionals used by the bias and risk formulas.

Everything is evaluated through the Poisson mixture representation

    chi2_v(D) = sum_k Pois(k; D/2) * chi2_{v+2k},

so each quantity reduces to closed forms for central chi-square components.
The mixture is truncated once the neglected Poisson mass is below
``TAIL_MASS``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from .errors import DomainError, UnsupportedError

TAIL_MASS = 1e-14

__all__ = [
    "NoncentralChiSq",
    "cdf",
    "sf",
    "inv_moment",
    "truncated_inv_moment",
    "poisson_weights",
]


@dataclass(frozen=True)
class NoncentralChiSq:
    """Non-central chi-square law with ``df`` degrees of freedom."""

    df: int
    noncentrality: float = 0.0

    def __post_init__(self):
        if isinstance(self.df, bool) or int(self.df) != self.df or self.df < 1:
            raise DomainError(f"df must be a positive integer, got {self.df!r}")
        nc = float(self.noncentrality)
        if not math.isfinite(nc):
            raise DomainError("noncentrality must be finite")
        if nc < 0:
            raise DomainError(f"noncentrality must be >= 0, got {nc}")
        object.__setattr__(self, "df", int(self.df))
        object.__setattr__(self, "noncentrality", nc)


def poisson_weights(noncentrality: float) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(k, w)`` with Poisson(noncentrality/2) weights.

    The window is chosen so that the mass outside it is below ``TAIL_MASS``.
    """
    lam = 0.5 * noncentrality
    if lam == 0.0:
        return np.zeros(1, dtype=np.int64), np.ones(1)
    half = 0.5 * TAIL_MASS
    lo = int(stats.poisson.ppf(half, lam))
    hi = int(stats.poisson.isf(half, lam)) + 1
    lo = max(lo - 1, 0)
    k = np.arange(lo, hi + 1, dtype=np.int64)
    w = np.exp(k * math.log(lam) - lam - special.gammaln(k + 1.0))
    return k, w


def _check_x(x):
    x = float(x)
    if not math.isfinite(x):
        raise DomainError(f"x must be finite, got {x}")
    if x < 0:
        raise DomainError(f"x must be >= 0, got {x}")
    return x


def cdf(dist: NoncentralChiSq, x: float) -> float:
    """P(chi2_v(D) <= x)."""
    x = _check_x(x)
    k, w = poisson_weights(dist.noncentrality)
    val = float(np.dot(w, stats.chi2.cdf(x, dist.df + 2 * k)))
    return min(max(val, 0.0), 1.0)


def sf(dist: NoncentralChiSq, x: float) -> float:
    """P(chi2_v(D) > x), summed directly rather than as ``1 - cdf``."""
    x = _check_x(x)
    k, w = poisson_weights(dist.noncentrality)
    val = float(np.dot(w, stats.chi2.sf(x, dist.df + 2 * k)))
    return min(max(val, 0.0), 1.0)


def _check_order(j):
    if isinstance(j, bool) or int(j) != j or j not in (0, 1, 2):
        raise UnsupportedError(f"only orders j in {{0, 1, 2}} are supported, got {j!r}")
    return int(j)


def _log_moment_factor(m: np.ndarray, j: int) -> np.ndarray:
    # log E[chi2_m^{-j}] = -j log 2 + lgamma(m/2 - j) - lgamma(m/2)
    return -j * math.log(2.0) + special.gammaln(0.5 * m - j) - special.gammaln(0.5 * m)


def inv_moment(dist: NoncentralChiSq, j: int) -> float:
    """E[(chi2_v(D))^{-j}] for j in {1, 2}.

    Finite only when v > 2j.
    """
    j = _check_order(j)
    if j == 0:
        raise UnsupportedError("inv_moment needs j in {1, 2}; j=0 is the trivial mass 1")
    if dist.df <= 2 * j:
        raise DomainError(f"E[chi2_{dist.df}^-{2 * j}] is infinite (need df > {2 * j})")
    k, w = poisson_weights(dist.noncentrality)
    m = dist.df + 2 * k
    return float(np.dot(w, np.exp(_log_moment_factor(m, j))))


def truncated_inv_moment(dist: NoncentralChiSq, j: int, cutoff: float, side: str = "below") -> float:
    """E[(chi2_v(D))^{-j} * I(chi2_v(D) <= cutoff)] (``side="below"``) or
    the same with ``> cutoff`` (``side="above"``).

    Each mixture component uses

        int_0^c x^{-j} f_m(x) dx = 2^{-j} Gamma(m/2 - j) / Gamma(m/2) * H_{m-2j}(c; 0).

    ``j = 0`` gives truncated probability mass.
    """
    j = _check_order(j)
    c = float(cutoff)
    if math.isnan(c) or c <= 0:
        raise DomainError(f"cutoff must be > 0, got {cutoff!r}")
    if side not in ("below", "above"):
        raise DomainError(f"side must be 'below' or 'above', got {side!r}")
    if j >= 1 and dist.df <= 2 * j:
        raise DomainError(f"E[chi2_{dist.df}^-{2 * j}] is infinite (need df > {2 * j})")
    k, w = poisson_weights(dist.noncentrality)
    m = dist.df + 2 * k
    shifted = m - 2 * j
    if math.isinf(c):
        part = np.ones_like(w) if side == "below" else np.zeros_like(w)
    elif side == "below":
        part = stats.chi2.cdf(c, shifted)
    else:
        part = stats.chi2.sf(c, shifted)
    if j == 0:
        return float(np.dot(w, part))
    return float(np.dot(w, np.exp(_log_moment_factor(m, j)) * part))
