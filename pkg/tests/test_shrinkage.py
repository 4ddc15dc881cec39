import numpy as np
import pytest
from scipy import stats

from qshrink.errors import DomainError, UnsupportedError
from qshrink.qr_core import Dataset, GammaBlocks, QuantileFit, fit_full, fit_sub, gamma_blocks
from qshrink.shrinkage import combine, critical_value, estimate, positive_stein, pretest, shrink_factor, stein, wald_statistic

FM = np.array([1.0, 1.0])
SM = np.array([0.0, 0.0])


def _fit(beta, n=100, tau=0.5, p1=1):
    p = len(beta)
    I = np.eye(p)
    return QuantileFit(tau, np.asarray(beta, float), np.zeros(n), 0.0, I, I, I, I, n, p1, 1.0)


def _data(n=120, p1=3, p2=4, seed=0, beta2=0.0):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.standard_normal((n, p1 + p2 - 1))])
    beta = np.r_[np.ones(p1), np.full(p2, beta2)]
    y = X @ beta + rng.standard_t(3, n)
    return Dataset(y, X, p1=p1)


# -- Wald statistic ---------------------------------------------------------


def test_wald_zero_beta2():
    blocks = GammaBlocks.from_matrix(np.diag([1.0, 2.0]), 1)
    assert wald_statistic(_fit([0.7, 0.0]), blocks) == 0.0


def test_wald_scalar_arithmetic():
    blocks = GammaBlocks.from_matrix(np.diag([1.0, 2.0]), 1)
    assert wald_statistic(_fit([0.0, 0.3]), blocks) == pytest.approx(72.0)


def test_wald_needs_beta2():
    with pytest.raises(DomainError):
        estimate(Dataset(np.arange(5.0), np.ones((5, 1))), 0.5)


# -- pretest ----------------------------------------------------------------


def test_pretest_regions():
    c = critical_value(3, 0.05)
    assert np.array_equal(pretest(FM, SM, 0.0, 0.05, p1=2, p2=3), SM)
    assert np.array_equal(pretest(FM, SM, 1e6, 0.05, p1=2, p2=3), FM)
    assert np.array_equal(pretest(FM, SM, c, 0.05, p1=2, p2=3), SM)
    assert c == pytest.approx(stats.chi2.ppf(0.95, 3))


@pytest.mark.parametrize("alpha", [0.0, 1.0, -0.1])
def test_pretest_alpha_range(alpha):
    with pytest.raises(DomainError):
        pretest(FM, SM, 1.0, alpha, p1=2, p2=3)


# -- Stein and positive-part Stein -----------------------------------------


def test_stein_examples():
    assert np.array_equal(stein(FM, SM, 3.0, p1=2, p2=5), SM)
    big = stein(FM, SM, 1e12, p1=2, p2=5)
    assert np.linalg.norm(big - FM) < 1e-9 * np.linalg.norm(FM - SM)
    assert np.allclose(stein(FM, SM, 6.0, p1=2, p2=5), [0.5, 0.5])


def test_stein_needs_three_restrictions():
    with pytest.raises(UnsupportedError):
        stein(FM, SM, 5.0, p1=2, p2=2)
    with pytest.raises(UnsupportedError):
        positive_stein(FM, SM, 5.0, p1=2, p2=2)


def test_positive_stein_examples():
    assert np.array_equal(positive_stein(FM, SM, 1.0, p1=2, p2=5), SM)
    assert np.allclose(positive_stein(FM, SM, 6.0, p1=2, p2=5), (FM + SM) / 2)


def test_zero_wald_is_degenerate_sub_model():
    assert np.array_equal(stein(FM, SM, 0.0, p1=2, p2=5), SM)
    assert shrink_factor(0.0, 5) == -np.inf


@pytest.mark.parametrize("w", [0.0, 0.5, 1.0, 2.9, 3.0, 3.1, 6.0, 50.0, 1e9])
def test_stein_family_relations(w):
    s = stein(FM, SM, w, p1=2, p2=5)
    ps = positive_stein(FM, SM, w, p1=2, p2=5)
    if w >= 3.0:
        assert np.allclose(ps, s)
    else:
        assert np.array_equal(ps, SM)
    # PS on the segment [SM, FM]; S may overshoot past SM
    t = (ps - SM) @ (FM - SM) / ((FM - SM) @ (FM - SM))
    assert 0.0 <= t < 1.0
    assert np.allclose(ps, SM + t * (FM - SM))
    if 0 < w < 3.0:
        assert ((s - SM) @ (FM - SM)) < 0


# -- combine / estimate -----------------------------------------------------


def test_estimate_result_invariants():
    res = estimate(_data(seed=1), 0.5)
    assert res.wald >= 0 and res.shrink_factor <= 1
    assert np.array_equal(res.beta_PT, res.beta_FM) or np.array_equal(res.beta_PT, res.beta_SM)
    if res.shrink_factor <= 0:
        assert np.array_equal(res.beta_PS, res.beta_SM)
    assert res.decisions["pretest_accept"] == (res.wald <= res.critical_value)
    for name in ("FM", "SM", "PT", "S", "PS"):
        assert np.array_equal(res.coef(name), res.full_coef[name][:3])


def test_scale_invariance():
    d = _data(seed=2, beta2=0.2)
    a = estimate(d, 0.5)
    b = estimate(Dataset(4.0 * d.y, d.X, p1=d.p1), 0.5)
    assert b.wald == pytest.approx(a.wald, rel=1e-6)
    for name in ("FM", "SM", "PT", "S", "PS"):
        assert np.allclose(b.coef(name), 4.0 * a.coef(name), atol=1e-6)


def test_small_p2_leaves_stein_out():
    res = estimate(_data(p2=2, seed=3), 0.5)
    assert res.beta_S is None and res.beta_PS is None
    assert set(res.full_coef) == {"FM", "SM", "PT"}


def test_combine_uses_given_blocks():
    d = _data(seed=4)
    full = fit_full(d, 0.5)
    res = combine(full, fit_sub(d, 0.5), gamma_blocks(full), alpha=0.1)
    assert res.alpha == 0.1 and res.critical_value == pytest.approx(stats.chi2.isf(0.1, 4))
