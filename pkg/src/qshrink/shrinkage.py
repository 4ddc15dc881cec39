"""Wald test and the pretest / Stein / positive-part Stein combinations."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import DomainError, SingularBlockError, UnsupportedError
from .qr_core import Dataset, GammaBlocks, QuantileFit, fit_full, fit_sub, gamma_blocks

ESTIMATORS = ("FM", "SM", "PT", "S", "PS")


def wald_statistic(full: QuantileFit, blocks: GammaBlocks) -> float:
    """W_n = n / (tau (1 - tau)) * b2' Gamma_22.1 b2."""
    if blocks.p2 < 1:
        raise DomainError("Wald test needs p2 >= 1")
    try:
        np.linalg.cholesky(blocks.G22_1)
    except np.linalg.LinAlgError:
        raise SingularBlockError("Gamma_22.1 is not positive definite") from None
    b2 = np.asarray(full.beta)[blocks.p1 :]
    if b2.size != blocks.p2:
        raise DomainError("full-model coefficients do not match the block partition")
    tau = full.tau
    w = full.n / (tau * (1.0 - tau)) * float(b2 @ blocks.G22_1 @ b2)
    return max(w, 0.0)


def critical_value(p2: int, alpha: float) -> float:
    """Upper-alpha quantile of chi-square with p2 degrees of freedom."""
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
    return float(stats.chi2.isf(alpha, p2))


def _coef(fit_or_vec, p1):
    v = fit_or_vec.beta if isinstance(fit_or_vec, QuantileFit) else np.asarray(fit_or_vec, dtype=float)
    return v[:p1] if p1 is not None else v


def _dims(full, sub, p1, p2):
    if isinstance(full, QuantileFit):
        p1 = full.p1 if p1 is None else p1
        p2 = full.beta.size - p1 if p2 is None else p2
    elif p1 is None and isinstance(sub, QuantileFit):
        p1 = sub.beta.size
    if p2 is None:
        raise DomainError("p2 is required when coefficient vectors are passed directly")
    return p1, p2


def pretest(full, sub, wald: float, alpha: float = 0.05, *, p1=None, p2=None) -> np.ndarray:
    """Sub-model coefficients if W_n <= chi2_{p2, alpha}, else full-model ones."""
    p1, p2 = _dims(full, sub, p1, p2)
    c = critical_value(p2, alpha)
    fm, sm = _coef(full, p1), _coef(sub, p1)
    return (sm if wald <= c else fm).copy()


def shrink_factor(wald: float, p2: int) -> float:
    """1 - (p2 - 2) / W_n.  Returns ``-inf`` for W_n = 0."""
    if wald <= 0:
        return -np.inf
    return 1.0 - (p2 - 2) / wald


def _stein_parts(full, sub, wald, p2, p1):
    p1, p2 = _dims(full, sub, p1, p2)
    if p2 < 3:
        raise UnsupportedError(f"Stein-type shrinkage needs p2 >= 3, got {p2}")
    if wald < 0:
        raise DomainError("Wald statistic must be >= 0")
    return _coef(full, p1), _coef(sub, p1), p2


def stein(full, sub, wald: float, *, p1=None, p2=None) -> np.ndarray:
    """SM + (FM - SM) * (1 - (p2 - 2) / W_n).  W_n = 0 maps to SM."""
    fm, sm, p2 = _stein_parts(full, sub, wald, p2, p1)
    if wald == 0:
        return sm.copy()
    return sm + (fm - sm) * shrink_factor(wald, p2)


def positive_stein(full, sub, wald: float, *, p1=None, p2=None) -> np.ndarray:
    """SM + (FM - SM) * max(0, 1 - (p2 - 2) / W_n)."""
    fm, sm, p2 = _stein_parts(full, sub, wald, p2, p1)
    if wald == 0:
        return sm.copy()
    return sm + (fm - sm) * max(0.0, shrink_factor(wald, p2))


@dataclass
class ShrinkageResult:
    """The five estimators of beta_1 plus the test that drives them.

    ``beta_*`` hold the length-``p1`` coefficient vectors.  ``full_coef``
    holds length-``p`` versions; the beta_2 part of PT/S/PS is the full-model
    beta_2 scaled by the same selection / shrinkage weight, which is what the
    prediction experiments use.
    """

    tau: float
    alpha: float
    wald: float
    critical_value: float
    shrink_factor: float
    beta_FM: np.ndarray
    beta_SM: np.ndarray
    beta_PT: np.ndarray
    beta_S: np.ndarray | None
    beta_PS: np.ndarray | None
    beta2_FM: np.ndarray
    decisions: dict = field(default_factory=dict)
    full_coef: dict = field(default_factory=dict)

    def coef(self, name: str) -> np.ndarray:
        return getattr(self, f"beta_{name}")


def combine(full: QuantileFit, sub: QuantileFit, blocks: GammaBlocks, alpha: float = 0.05) -> ShrinkageResult:
    """Build every estimator from a full fit, a sub-model fit and Gamma blocks."""
    p1, p2 = blocks.p1, blocks.p2
    if p2 < 1:
        raise DomainError("shrinkage needs a non-empty beta_2 block")
    w = wald_statistic(full, blocks)
    c = critical_value(p2, alpha)
    fm = full.beta[:p1].copy()
    sm = sub.beta[:p1].copy()
    b2 = full.beta[p1:].copy()
    accept = w <= c
    pt = sm.copy() if accept else fm.copy()
    weights = {"FM": 1.0, "SM": 0.0, "PT": 0.0 if accept else 1.0}
    s = ps = None
    factor = shrink_factor(w, p2)
    degenerate = w == 0
    if p2 >= 3:
        s = stein(fm, sm, w, p2=p2)
        ps = positive_stein(fm, sm, w, p2=p2)
        weights["S"] = 0.0 if degenerate else factor
        weights["PS"] = 0.0 if degenerate else max(0.0, factor)
    full_coef = {}
    for name, wt in weights.items():
        head = {"FM": fm, "SM": sm, "PT": pt, "S": s, "PS": ps}[name]
        full_coef[name] = np.concatenate([head, wt * b2])
    return ShrinkageResult(
        tau=full.tau,
        alpha=alpha,
        wald=w,
        critical_value=c,
        shrink_factor=factor,
        beta_FM=fm,
        beta_SM=sm,
        beta_PT=pt,
        beta_S=s,
        beta_PS=ps,
        beta2_FM=b2,
        decisions={
            "pretest_accept": bool(accept),
            "positive_part_truncated": bool(p2 >= 3 and factor <= 0),
            "degenerate_wald": bool(degenerate),
        },
        full_coef=full_coef,
    )


def estimate(data: Dataset, tau: float, alpha: float = 0.05) -> ShrinkageResult:
    """Fit FM and SM on ``data`` and combine them."""
    if data.p2 < 1:
        raise DomainError("shrinkage needs p2 >= 1 (no beta_2 block)")
    full = fit_full(data, tau)
    sub = fit_sub(data, tau)
    return combine(full, sub, gamma_blocks(full, data.p1), alpha)
