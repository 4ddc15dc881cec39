import numpy as np
import pytest

from oracles import gaussian_estimators, quadratic_bias_mc, scalar_block_toy, z_score
from qshrink.asymptotics import (
    ESTIMATORS,
    AsymptoticInputs,
    alternative_for_Delta,
    bias,
    covariance,
    covariance_objects,
    curves,
    local_alternative,
    quadratic_bias,
    risk,
)
from qshrink.errors import DomainError, UnsupportedError
from qshrink.qr_core import GammaBlocks

DRAWS = 10**6
DELTAS = (0.0, 1.0, 5.0, 20.0)


def _random_inputs(p1=2, p2=3, seed=0, tau=0.3):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((p1 + p2, p1 + p2))
    G = A @ A.T + (p1 + p2) * np.eye(p1 + p2)
    return AsymptoticInputs(GammaBlocks.from_matrix(G, p1), tau)


# -- covariance objects -----------------------------------------------------


def test_orthogonal_blocks_kill_phi():
    inp = AsymptoticInputs(GammaBlocks.from_matrix(np.diag([1.0, 2.0, 3.0, 4.0]), 2), 0.5)
    co = covariance_objects(inp)
    assert np.allclose(co.Phi, 0) and np.allclose(co.Sigma12, 0)
    assert np.allclose(local_alternative(inp, [1.0, 2.0]).delta, 0)


def test_phi_scalar_arithmetic():
    inp = AsymptoticInputs(GammaBlocks.from_matrix([[2.0, 1.0], [1.0, 2.0]], 1), 0.5)
    assert covariance_objects(inp).Phi[0, 0] == pytest.approx(1 / 24)


def test_phi_matches_gaussian_simulation():
    inp = _random_inputs(seed=1)
    _, est = gaussian_estimators(inp, 0.0, DRAWS, seed=11)
    theta3 = est["SM"] - est["FM"]
    emp = np.cov(theta3, rowvar=False)
    Phi = covariance_objects(inp).Phi
    for i in range(inp.p1):
        for j in range(inp.p1):
            prod = (theta3[:, i] - theta3[:, i].mean()) * (theta3[:, j] - theta3[:, j].mean())
            assert abs(z_score(prod, Phi[i, j])) < 3
    assert np.allclose(emp, Phi, rtol=0.02, atol=1e-4)


# -- bias -------------------------------------------------------------------


def test_bias_fm_is_zero_and_sm_zero_under_null():
    inp = scalar_block_toy()
    for D in DELTAS:
        assert np.all(bias("FM", alternative_for_Delta(inp, D), inp) == 0)
    assert np.all(bias("SM", local_alternative(inp, np.zeros(3)), inp) == 0)


def test_pt_bias_simulation():
    inp = scalar_block_toy(p=5)
    alt, est = gaussian_estimators(inp, 3.0, DRAWS, seed=12)
    B = bias("PT", alt, inp)
    for j in range(5):
        assert abs(z_score(est["PT"][:, j], B[j])) < 3


def test_unknown_estimator():
    inp = scalar_block_toy()
    with pytest.raises(UnsupportedError):
        bias("XX", alternative_for_Delta(inp, 1.0), inp)


def test_stein_needs_three_restrictions():
    inp = _random_inputs(p2=2)
    with pytest.raises(UnsupportedError):
        risk("S", alternative_for_Delta(inp, 1.0), inp)


# -- quadratic bias ---------------------------------------------------------


def test_quadratic_bias_examples():
    inp = AsymptoticInputs(GammaBlocks.from_matrix([[2.0, 1.0], [1.0, 2.0]], 1), 0.5)
    alt = local_alternative(inp, [1.0])
    assert quadratic_bias("FM", alt, inp) == 0.0
    assert quadratic_bias("SM", alt, inp) == pytest.approx(0.5**2 * 1.5)


def test_qb_positive_part_below_stein():
    inp = scalar_block_toy()
    for D in np.linspace(0, 40, 41):
        alt = alternative_for_Delta(inp, D)
        assert quadratic_bias("PS", alt, inp) <= quadratic_bias("S", alt, inp) + 1e-15


def test_qb_limits():
    inp = scalar_block_toy()
    grid = [0.5, 2, 8, 32, 128, 512, 2048]
    qb = {e: [quadratic_bias(e, alternative_for_Delta(inp, D), inp) for D in grid] for e in ESTIMATORS}
    assert np.all(np.diff(qb["SM"]) > 0) and qb["SM"][-1] > 100 * qb["SM"][0]
    for e in ("PT", "S", "PS"):
        assert qb[e][-1] < 0.01 * max(qb[e])


# -- risk -------------------------------------------------------------------


def test_fm_risk_closed_form():
    inp = _random_inputs(seed=2)
    alt = alternative_for_Delta(inp, 4.0)
    ref = inp.scale * np.trace(inp.W @ np.linalg.inv(inp.blocks.G11_2))
    assert risk("FM", alt, inp) == pytest.approx(ref, rel=1e-12)


def test_sm_risk_under_null():
    inp = _random_inputs(seed=3)
    alt = local_alternative(inp, np.zeros(3))
    r_sm = risk("SM", alt, inp)
    assert r_sm == pytest.approx(inp.scale * np.trace(np.linalg.inv(inp.blocks.G11)), rel=1e-12)
    assert r_sm <= risk("FM", alt, inp)


def test_risks_coincide_without_coupling():
    inp = AsymptoticInputs(GammaBlocks.from_matrix(np.diag([1.0, 2.0, 3.0, 4.0, 5.0]), 2), 0.5)
    alt = local_alternative(inp, np.zeros(3))
    r = [risk(e, alt, inp) for e in ESTIMATORS]
    assert np.allclose(r, r[0], rtol=1e-12)


def test_ps_risk_below_stein():
    inp = scalar_block_toy()
    for D in np.linspace(0, 40, 41):
        alt = alternative_for_Delta(inp, D)
        assert risk("PS", alt, inp) <= risk("S", alt, inp) + 1e-12


@pytest.mark.parametrize("Delta", DELTAS)
def test_gaussian_oracle_all_estimators(Delta):
    """Bias, QB and risk of every estimator against the limiting Gaussian law."""
    inp = scalar_block_toy()
    alt, est = gaussian_estimators(inp, Delta, DRAWS, seed=100 + int(Delta))
    G = inp.blocks.G11_2
    for name, theta in est.items():
        B = bias(name, alt, inp)
        for j in range(inp.p1):
            assert abs(z_score(theta[:, j], B[j])) < 3, (name, j)
        qb, se = quadratic_bias_mc(theta, G)
        assert abs(qb - quadratic_bias(name, alt, inp)) < 3 * se + 1e-12, name
        loss = np.einsum("ij,jk,ik->i", theta, inp.W, theta)
        assert abs(z_score(loss, risk(name, alt, inp))) < 3, name
        assert np.allclose(covariance(name, alt, inp), covariance(name, alt, inp).T)


def test_printed_route_matches_for_fm_and_sm():
    inp = scalar_block_toy()
    for D in DELTAS:
        alt = alternative_for_Delta(inp, D)
        for name in ("FM", "SM"):
            assert risk(name, alt, inp, "printed") == pytest.approx(risk(name, alt, inp), rel=1e-10)


def test_printed_route_departs_from_simulation():
    # the alternative PT / S / PS risk expressions disagree with simulation
    inp = scalar_block_toy()
    alt, est = gaussian_estimators(inp, 5.0, DRAWS, seed=150)
    for name in ("PT", "S", "PS"):
        loss = np.einsum("ij,ij->i", est[name], est[name])
        assert abs(z_score(loss, risk(name, alt, inp, "printed"))) > 10


# -- curves -----------------------------------------------------------------


def test_curves_at_zero():
    rows = curves(scalar_block_toy(), [0.0])
    assert all(r["qb"] == 0.0 and r["bias_norm"] == 0.0 for r in rows)


def test_curves_fm_constant_and_pt_shape():
    grid = np.linspace(0, 60, 121)
    rows = curves(scalar_block_toy(), grid)
    fm = np.array([r["risk"] for r in rows if r["estimator"] == "FM"])
    pt = np.array([r["risk"] for r in rows if r["estimator"] == "PT"])
    assert np.allclose(fm, fm[0], rtol=1e-14)
    assert pt[0] < fm[0] and pt.max() > fm[0]
    assert abs(pt[-1] - fm[-1]) < 1e-3 * fm[-1]


def test_curves_validation():
    inp = scalar_block_toy()
    with pytest.raises(DomainError):
        curves(inp, [])
    with pytest.raises(DomainError):
        curves(inp, [1.0, 0.5])
    with pytest.raises(DomainError):
        curves(inp, [-1.0])


def test_printed_noncentrality_needs_square_blocks():
    inp = _random_inputs(p1=2, p2=3)
    with pytest.raises(DomainError):
        local_alternative(inp, np.ones(3), noncentrality="printed")
    sq = scalar_block_toy()
    alt = local_alternative(sq, np.ones(3), noncentrality="printed")
    assert alt.Delta > 0


def test_weight_matrix_validation():
    b = scalar_block_toy().blocks
    with pytest.raises(DomainError):
        AsymptoticInputs(b, 0.5, W=-np.eye(3))
    with pytest.raises(DomainError):
        AsymptoticInputs(b, 0.5, W=np.eye(2))
