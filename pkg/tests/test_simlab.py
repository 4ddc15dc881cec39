import types

import numpy as np
import pytest
from scipy import stats

from qshrink import simlab
from qshrink.errors import DomainError
from qshrink.simlab import (
    ErrorModel,
    ExperimentReport,
    SimulationConfig,
    Split,
    mrme_config,
    generate,
    model_error,
    mrme_sweep,
    pmad_experiment,
    replicate_rng,
    pmad_config,
    toeplitz_factor,
)


def _cfg(**kw):
    base = dict(p1=2, p2=3, beta_true=(1.0, 1.0, 0.0, 0.0, 0.0), n_train=40, replications=5)
    base.update(kw)
    return SimulationConfig(**base)


# -- configuration ------------------------------------------------------------


@pytest.mark.parametrize("rho", [1.0, -1.0, 1.5])
def test_rho_out_of_range(rho):
    with pytest.raises(DomainError):
        _cfg(rho=rho)
    with pytest.raises(DomainError):
        toeplitz_factor(3, rho)


def test_config_invariants():
    with pytest.raises(DomainError):
        ErrorModel("contaminated_normal", 1.2)
    with pytest.raises(DomainError):
        ErrorModel("student", 0.1)
    with pytest.raises(DomainError):
        _cfg(replications=0)
    with pytest.raises(DomainError):
        _cfg(beta_true=(1.0, 2.0))
    with pytest.raises(DomainError):
        _cfg(sub_columns=(0, 0))


# -- generate -----------------------------------------------------------------


def test_independent_design_when_rho_zero():
    n = 4000
    data = generate(_cfg(rho=0.0, n_train=n), 0)
    C = np.corrcoef(data.X, rowvar=False)
    off = C[~np.eye(C.shape[0], dtype=bool)]
    assert np.max(np.abs(off)) < 4 / np.sqrt(n)


def test_toeplitz_correlation():
    n = 20000
    data = generate(_cfg(rho=0.5, n_train=n), 1)
    C = np.corrcoef(data.X, rowvar=False)
    idx = np.arange(5)
    target = 0.5 ** np.abs(idx[:, None] - idx[None, :])
    assert np.max(np.abs(C - target)) < 4 / np.sqrt(n)


@pytest.mark.parametrize("kind", ["contaminated_normal", "cauchy_mixture"])
def test_gamma_zero_is_gaussian(kind):
    n = 5000
    e = ErrorModel(kind, 0.0).sample(replicate_rng(3, 0), n)
    kurt = stats.kurtosis(e, fisher=False)
    assert abs(kurt - 3.0) < 4 * np.sqrt(24.0 / n)


def test_contaminated_normal_variance():
    n = 10**5
    e = ErrorModel("contaminated_normal", 0.25, 100.0).sample(replicate_rng(4, 0), n)
    # variance of the sample variance: (mu4 - sigma^4) / n for a mean-zero law
    mu4 = 0.75 * 3 + 0.25 * 3 * 100.0**2
    se = np.sqrt((mu4 - 25.75**2) / n)
    assert abs(e.var() - 25.75) < 3 * se


def test_cauchy_mixture_fraction():
    n = 10**5
    e = ErrorModel("cauchy_mixture", 0.3).sample(replicate_rng(5, 0), n)
    # P(|e| > 5) = 0.7 P(|Z| > 5) + 0.3 P(|C| > 5)
    p = 0.7 * 2 * stats.norm.sf(5) + 0.3 * 2 * stats.cauchy.sf(5)
    hits = np.mean(np.abs(e) > 5)
    assert abs(hits - p) < 4 * np.sqrt(p * (1 - p) / n)


def test_generate_deterministic_and_independent_of_order():
    cfg = _cfg()
    a = generate(cfg, 3)
    for r in range(3):
        generate(cfg, r)
    b = generate(cfg, 3)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y)
    c = generate(cfg, 4)
    assert not np.array_equal(a.y, c.y)


def test_split_shapes_and_standardization():
    cfg = pmad_config(1, 0.1, replications=1)
    s = generate(cfg, 0)
    assert isinstance(s, Split)
    assert (s.train.n, s.valid.n, s.test.n) == (50, 50, 200)
    assert s.train.p1 == 3 and s.train.p == 8
    assert np.allclose(s.train.X.mean(axis=0), 0, atol=1e-12)
    assert np.allclose(s.train.X.std(axis=0), 1, atol=1e-12)


def test_intercept_and_reordering():
    cfg = _cfg(sub_columns=(3, 0), intercept=True, n_train=30)
    plain = generate(_cfg(n_train=30), 0)
    d = generate(cfg, 0)
    assert d.p1 == 3 and np.all(d.X[:, 0] == 1)
    assert np.array_equal(d.X[:, 1], plain.X[:, 3])
    assert np.array_equal(d.X[:, 2], plain.X[:, 0])


def test_variance_schedule_ramps():
    cfg = _cfg(n_train=20000, error=ErrorModel("contaminated_normal", 0.0), variance_schedule=(1.0, 9.0), beta_true=(0,) * 5)
    y = generate(cfg, 0).y
    assert np.var(y[:2000]) < 2.0 and np.var(y[-2000:]) > 7.0


# -- model error --------------------------------------------------------------


def test_model_error_examples():
    b = np.array([1.0, -2.0, 0.5])
    assert model_error(b, b) == 0.0
    assert model_error(b + [1, 0, 0], b) == 1.0
    assert model_error([1.0, 2.0], [0.0, 0.0]) == 5.0
    with pytest.raises(DomainError):
        model_error([1.0], [1.0, 2.0])


# -- MRME sweep ---------------------------------------------------------------


def _fake_estimate_all(name_source):
    def fake(data, tau, alpha):
        from qshrink.shrinkage import estimate

        res = estimate(data, tau, alpha)
        coef = res.full_coef[name_source]
        return types.SimpleNamespace(full_coef={k: coef for k in res.full_coef})

    return fake


def test_forced_equal_estimators_give_unit_mrme(monkeypatch):
    monkeypatch.setattr(simlab, "estimate", _fake_estimate_all("FM"))
    rep = mrme_sweep(mrme_config(replications=20), [0.0, 2.0], workers=1)
    assert all(r["mrme"] == 1.0 for r in rep.rows)


def test_zero_median_me_flagged(monkeypatch):
    def fake(data, tau, alpha):
        z = np.zeros(data.p)
        return types.SimpleNamespace(full_coef={k: z for k in simlab.ESTIMATORS_ME})

    monkeypatch.setattr(simlab, "estimate", fake)
    rep = mrme_sweep(mrme_config(replications=5, beta_true=(0.0,) * 10), [0.0], workers=1)
    assert all(r["degenerate"] and np.isnan(r["mrme"]) for r in rep.rows)


def test_mrme_grid_validation():
    with pytest.raises(DomainError):
        mrme_sweep(mrme_config(replications=2), [])
    with pytest.raises(DomainError):
        mrme_sweep(mrme_config(replications=2), [-1.0])


def test_mrme_deterministic_and_se_nonnegative():
    cfg = mrme_config(replications=30)
    a = mrme_sweep(cfg, [0.0, 1.0], workers=1)
    b = mrme_sweep(cfg, [0.0, 1.0], workers=1)
    assert a == b
    assert all(r["se_me"] >= 0 for r in a.rows)
    assert a.metadata["seed"] == cfg.seed and "provenance" in a.metadata


def test_replicate_order_permutation_invariance():
    cfg = mrme_config(replications=40)
    jobs = [(cfg, 0.5, r) for r in range(40)]
    fwd = simlab.run_replicates(simlab._me_replicate, jobs, workers=1)
    perm = np.random.default_rng(0).permutation(40)
    shuf = simlab.run_replicates(simlab._me_replicate, [jobs[i] for i in perm], workers=1)
    for k in fwd[0]:
        assert np.mean([o[k] for o in fwd]) == pytest.approx(np.mean([o[k] for o in shuf]), rel=1e-13)


def test_process_pool_matches_serial():
    cfg = mrme_config(replications=8)
    assert mrme_sweep(cfg, [0.5], workers=2) == mrme_sweep(cfg, [0.5], workers=1)


@pytest.mark.slow
def test_ps_never_worse_than_s_paired():
    rep = mrme_sweep(mrme_config(replications=500), [0.0, 1.0, 2.0, 4.0, 8.0], workers=1)
    for key, (mean, se) in rep.metadata["paired_ps_minus_s"].items():
        # one-sided 95%: PS - S must not be significantly positive
        assert mean - 1.645 * se <= 0, key


# -- PMAD protocol ------------------------------------------------------------


def test_pmad_noiseless_exact_fit(monkeypatch):
    monkeypatch.setattr(simlab, "PENALTIES", {})
    cfg = pmad_config(2, 0.1, replications=3, tau_list=(0.5,), variance_schedule=(1e-30, 1e-30), standardize=False)
    rep = pmad_experiment(cfg, workers=1)
    assert rep.value("mean", tau=0.5, estimator="FM") < 1e-6


def test_pmad_degenerate_test_set():
    cfg = pmad_config(1, 0.1, replications=1, n_test=3)
    with pytest.raises(DomainError):
        pmad_experiment(cfg, workers=1)
    cfg = pmad_config(1, 0.1, replications=1, n_valid=0, n_test=0)
    with pytest.raises(DomainError):
        pmad_experiment(cfg, workers=1)


def test_pmad_report_layout():
    cfg = pmad_config(1, 0.25, replications=3, tau_list=(0.25,))
    rep = pmad_experiment(cfg, workers=1)
    assert rep.columns == simlab.PMAD_COLUMNS
    names = [r["estimator"] for r in rep.rows]
    assert names == list(simlab.ESTIMATORS_PMAD)
    assert rep.lookup(estimator="LSE")[0]["tau"] is None
    assert all(r["case"] == 1 and r["gamma"] == 0.25 for r in rep.rows)
    assert rep.metadata["penalties"]["ENET"]["alpha"] == 0.5
    assert rep == pmad_experiment(cfg, workers=1)


def test_sm_dominates_fm_under_null(monkeypatch):
    # the prediction-study truth satisfies the sub-model restriction
    monkeypatch.setattr(simlab, "PENALTIES", {})
    cfg = pmad_config(2, 0.1, replications=500, tau_list=(0.5,))
    out = simlab.run_replicates(simlab._pmad_replicate, [(cfg, r) for r in range(500)], workers=1)
    d = np.array([o[(0.5, "FM")] - o[(0.5, "SM")] for o in out])
    t = d.mean() / (d.std(ddof=1) / np.sqrt(d.size))
    assert t > stats.norm.ppf(0.99)


def test_report_rejects_bad_rows():
    with pytest.raises(DomainError):
        ExperimentReport(("a", "se"), [{"a": 1.0}])
    with pytest.raises(DomainError):
        ExperimentReport(("se",), [{"se": -1.0}])
