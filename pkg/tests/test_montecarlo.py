import numpy as np
import pytest

from conftest import random_cov
from transferrisk.asymptotics import risk_components, whiten
from transferrisk.model import CovarianceModel, stream
from transferrisk.montecarlo import (
    RISK_CURVE_COLUMNS,
    fg_estimates,
    fg_estimates_sampled,
    projection_operator,
    risk_curve,
    sc_decomposition,
)
from transferrisk.penalty import Penalty, RegularizationParams, Representation, build_penalty


def _problem(p=10, seed=0):
    rng = stream(seed, 1)
    cov = CovarianceModel.from_matrix(random_cov(rng, p))
    pen = build_penalty(Representation.from_matrix(rng.standard_normal((p, 3))), RegularizationParams(0.7, 0.2, 1.6))
    return cov, pen, rng.standard_normal(p)


def test_full_rank_design_has_no_sc_bias():
    cov, _, beta = _problem()
    X = stream(1, 2).standard_normal((20, 10))
    b, v = sc_decomposition(X, Penalty.isotropic(10), beta, cov.sigma, 1.0)
    assert b <= 1e-20
    np.testing.assert_allclose(projection_operator(X, Penalty.isotropic(10)), np.eye(10), atol=1e-10)


def test_noiseless_sc_variance_is_zero():
    cov, pen, beta = _problem()
    X = stream(1, 2).standard_normal((5, 10))
    assert sc_decomposition(X, pen, beta, cov.sigma, 0.0)[1] == 0.0


def test_sc_closed_form_matches_noise_resampling():
    cov, pen, beta = _problem()
    X = stream(2, 2).standard_normal((5, 10)) @ cov.sqrt
    s2 = 0.8
    b, v = sc_decomposition(X, pen, beta, cov.sigma, s2)
    A = pen.gamma_inv_sqrt @ np.linalg.pinv(X @ pen.gamma_inv_sqrt)
    eps = np.sqrt(s2) * stream(2, 3).standard_normal((1000, 5))
    fits = (X @ beta + eps) @ A.T
    err = fits - beta
    risks = np.einsum("ki,ij,kj->k", err, cov.sigma, err)
    se = risks.std(ddof=1) / np.sqrt(risks.size)
    assert abs(risks.mean() - (b + v)) <= 3 * se


def test_noiseless_fg_variances_vanish():
    cov, pen, beta = _problem()
    est = fg_estimates(cov, pen, beta, 0.0, 4, 10, seed=0)
    assert est.var_eps == 0.0 and est.var_xeps == 0.0


def test_fg_terms_telescope_and_match_sc():
    cov, pen, beta = _problem()
    est = fg_estimates(cov, pen, beta, 0.9, 4, 40, seed=1)
    assert est.telescoped == pytest.approx(est.risk, rel=1e-12)
    assert est.bias_sc == pytest.approx(est.bias + est.var_x, abs=1e-9)
    assert est.var_sc == pytest.approx(est.var_eps + est.var_xeps, abs=1e-9)


def test_noise_only_variance_vanishes_with_many_designs():
    cov, pen, beta = _problem()
    est = fg_estimates(cov, pen, beta, 1.0, 4, 2000, seed=2)
    assert est.var_eps <= 3 * est.se["var_eps"]


def test_sampled_noise_route_agrees():
    cov, pen, beta = _problem(p=8, seed=3)
    exact = fg_estimates(cov, pen, beta, 0.5, 4, 200, seed=3)
    sampled = fg_estimates_sampled(cov, pen, beta, 0.5, 4, 200, 200, seed=3)
    assert abs(sampled.risk - exact.risk) <= 3 * sampled.risk_se
    assert abs(sampled.bias + sampled.var_x - exact.bias_sc) <= 0.1 * exact.bias_sc


def test_same_seed_independent_of_threads():
    cov, pen, beta = _problem()
    a = fg_estimates(cov, pen, beta, 1.0, 4, 12, seed=5, threads=1)
    b = fg_estimates(cov, pen, beta, 1.0, 4, 12, seed=5, threads=4)
    assert a == b


def test_mc_tracks_asymptotics_on_isotropic_problem():
    p, n = 200, 80
    cov = CovarianceModel.from_matrix(np.eye(p))
    beta = stream(6, 1).standard_normal(p) / np.sqrt(p) * 3
    est = fg_estimates(cov, Penalty.isotropic(p), beta, 1.0, n, 50, seed=6)
    asy = risk_components(whiten(cov, Penalty.isotropic(p)), beta, 1.0, n).risk
    assert abs(est.risk - asy) <= 0.05 * asy


def test_risk_curve_schema_and_boundary():
    cov, pen, beta = _problem(p=6)
    rows = risk_curve(cov, {"A": pen}, beta, 1.0, [3, 6, 9], 5, seed=0)
    assert [r["n"] for r in rows] == [3, 6, 9]
    for r in rows:
        assert list(r) == RISK_CURVE_COLUMNS
    assert [r["status"] for r in rows] == ["ok", "boundary", "ok_sample_rich"]
    assert np.isnan(rows[1]["R_asy"])


def test_needs_two_replicates():
    cov, pen, beta = _problem()
    with pytest.raises(ValueError):
        fg_estimates(cov, pen, beta, 1.0, 4, 1, seed=0)
