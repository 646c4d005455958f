import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from transferrisk.model import (
    CovarianceModel,
    CovarianceSpec,
    ProblemInstance,
    TaskModel,
    ar1_matrix,
    calibrate_snr,
    make_covariance,
    norm_report,
    sample_data,
    sample_ground_truth,
    sample_task,
    stream,
)


def _instance(p=6, q=3, noise_var=1.0, seed=0):
    cov = make_covariance(CovarianceSpec("ar1", p=p, rho=0.3))
    truth = sample_ground_truth(p, q, np.eye(p), stream(seed, 1))
    scale = calibrate_snr(truth.B, np.eye(q), max(noise_var, 1e-3), 5.0)
    return ProblemInstance(cov, truth, TaskModel(np.eye(q), scale, noise_var))


def test_ar1_zero_correlation_is_identity():
    cov = make_covariance(CovarianceSpec("ar1", p=3, rho=0.0))
    assert np.array_equal(cov.sigma, np.eye(3))
    assert cov.rank == 3


def test_ar1_two_by_two_eigenvalues():
    cov = make_covariance(CovarianceSpec("ar1", p=2, rho=0.5))
    np.testing.assert_allclose(cov.sigma, [[1, 0.5], [0.5, 1]])
    np.testing.assert_allclose(cov.eigvals, [1.5, 0.5], atol=1e-14)


def test_wishart_rank_equals_m():
    cov = make_covariance(CovarianceSpec("wishart_jitter", p=50, m=10, jitter=0.0), stream(0, 1))
    assert cov.rank == 10
    assert cov.eta_min_pos > 0


def test_ar1_rejects_unit_correlation():
    with pytest.raises(ValueError):
        make_covariance(CovarianceSpec("ar1", p=3, rho=1.0))


def test_explicit_non_psd_reports_eigenvalue():
    with pytest.raises(ValueError, match="-1.000e"):
        CovarianceModel.from_matrix(np.diag([1.0, -1.0]))


def test_asymmetric_rejected():
    with pytest.raises(ValueError, match="symmetric"):
        CovarianceModel.from_matrix(np.array([[1.0, 0.3], [0.0, 1.0]]))


def test_tiny_negative_eigenvalue_is_clamped():
    a = np.diag([1.0, -1e-15])
    cov = CovarianceModel.from_matrix(a)
    assert cov.eigvals.min() == 0.0
    assert cov.rank == 1


@given(st.floats(-0.9, 0.9), st.integers(1, 25))
def test_eigendecomposition_roundtrip(rho, p):
    cov = make_covariance(CovarianceSpec("ar1", p=p, rho=rho))
    U = cov.eigvecs
    assert np.abs(U.T @ U - np.eye(p)).max() <= 1e-10
    rebuilt = (U * cov.eigvals) @ U.T
    assert np.abs(rebuilt - cov.sigma).max() <= 1e-9 * cov.eigvals[0]
    assert np.all(np.diff(cov.eigvals) <= 1e-12)


def test_norm_report_warns_when_ill_conditioned():
    cov = CovarianceModel.from_matrix(np.diag([1.0, 1e-8]))
    with pytest.warns(UserWarning, match="ill-conditioned"):
        rep = norm_report(cov)
    assert rep["inv_eta_min_pos"] == pytest.approx(1e8)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        norm_report(CovarianceModel.from_matrix(np.eye(3)))


def test_zero_column_covariance_gives_zero_truth():
    truth = sample_ground_truth(5, 4, np.zeros((5, 5)), stream(0, 2))
    assert np.array_equal(truth.B, np.zeros((5, 4)))


def test_marchenko_pastur_edge():
    p = 400
    truth = sample_ground_truth(p, p, np.eye(p), stream(3, 2))
    s = np.linalg.svd(truth.B / np.sqrt(p), compute_uv=False)
    assert s.max() <= 2.0 + 0.1
    assert s.min() >= 0.0


def test_column_sample_covariance_matches_ar1():
    p, q = 8, 20000
    target = ar1_matrix(0.5, p)
    truth = sample_ground_truth(p, q, target, stream(4, 2))
    emp = truth.B @ truth.B.T / q
    assert np.linalg.norm(emp - target) / np.linalg.norm(target) < 0.05


def test_calibrate_snr_hand_values():
    B = np.eye(4)
    assert calibrate_snr(B, np.eye(4), 1.0, 0.0) == 0.0
    assert calibrate_snr(B, np.eye(4), 1.0, 10.0) == pytest.approx(100.0)
    assert calibrate_snr(B, np.eye(4), 2.0, 10.0) == pytest.approx(200.0)


def test_calibrate_snr_rejects_zero_representation():
    with pytest.raises(ValueError, match="uninformative"):
        calibrate_snr(np.zeros((3, 2)), np.eye(2), 1.0, 1.0)


def test_calibrated_signal_norm_statistical():
    inst = _instance(p=6, q=3)
    draws = np.array([sample_task(inst, stream(9, 0, i))[1] for i in range(1000)])
    norms = np.sum(draws**2, axis=1)
    expected = inst.task.scale / inst.q * np.trace(inst.truth.B @ inst.truth.B.T)
    se = norms.std(ddof=1) / np.sqrt(norms.size)
    assert abs(norms.mean() - expected) <= 3 * se
    # target SNR^2 * sigma^2 = 25
    assert expected == pytest.approx(25.0)


def test_noiseless_labels_are_exact():
    inst = _instance(noise_var=0.0)
    _, beta = sample_task(inst, stream(1, 0))
    data = sample_data(inst, beta, 10, stream(1, 1))
    assert np.array_equal(data.y, data.X @ beta)


def test_same_seed_same_dataset():
    inst = _instance()
    _, beta = sample_task(inst, stream(1, 0))
    a = sample_data(inst, beta, 7, stream(5, 1))
    b = sample_data(inst, beta, 7, stream(5, 1))
    assert np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y)
    c = sample_data(inst, beta, 7, stream(5, 2))
    assert not np.array_equal(a.X, c.X)
