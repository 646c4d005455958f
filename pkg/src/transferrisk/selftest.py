"""Quick built-in oracle checks, run by ``transferrisk selftest``."""
from __future__ import annotations

import numpy as np

from . import full_opt as fo
from .asymptotics import risk_components, solve_b0, variance_factor, whiten
from .model import CovarianceModel, stream
from .montecarlo import fg_estimates
from .penalty import Penalty, RegularizationParams, shrink_profile
from .spectrum_opt import minimize_bias_spectrum, problem_from_arrays


def _check_fixed_point():
    a = solve_b0(np.ones(4), 2)
    b = solve_b0(np.array([2.0, 1.0]), 1)
    return abs(a - 1) < 1e-12 and abs(b - 2**-0.5) < 1e-12


def _check_shrink():
    reg = RegularizationParams(1.0, 0.0, 1.0)
    return abs(float(shrink_profile(np.array([2.0]), reg)[0]) - 0.375) < 1e-12


def _check_variance_minimizer():
    rng = stream(0, 100)
    W = rng.standard_normal((30, 30))
    cov = CovarianceModel.from_matrix(W @ W.T / 30 + 0.1 * np.eye(30))
    pen = Penalty(r=0.7 * cov.eigvals, basis=cov.eigvecs)
    spec = whiten(cov, pen)
    V = variance_factor(spec.t, solve_b0(spec, 10))
    return abs(V - 1 / (30 / 10 - 1)) < 1e-10


def _check_soft_optimum():
    prob = problem_from_arrays([1.0, 1.0, 1.0], [10.0, 1.0, 0.1], n=1, q=1)
    return abs(minimize_bias_spectrum(prob).value - 1.009091) < 1e-6


def _check_gradient():
    rng = stream(0, 101)
    p, k, q, n = 8, 3, 2, 4
    W = rng.standard_normal((p, p))
    setup = fo.ObjectiveSetup(W @ W.T / p + 0.1 * np.eye(p), rng.standard_normal((p, q)), np.eye(q), 1.0, n)
    B = rng.standard_normal((p, k)) / np.sqrt(k)
    lam = np.array([0.8, 0.5, 1.3])
    gb = fo.objective(B, lam, setup)
    gB, gl = fo.fd_gradient(B, lam, setup)
    num = np.linalg.norm(np.concatenate([(gb.grad_B - gB).ravel(), gb.grad_lam - gl]))
    den = np.linalg.norm(np.concatenate([gB.ravel(), gl]))
    return num / den < 1e-4


def _check_telescoping():
    rng = stream(0, 102)
    cov = CovarianceModel.from_matrix(np.eye(12))
    beta = rng.standard_normal(12)
    est = fg_estimates(cov, Penalty.isotropic(12), beta, 0.5, 6, 20, seed=0)
    ok_sum = abs(est.telescoped - est.risk) < 1e-9 * max(1.0, est.risk)
    asy = risk_components(whiten(cov, Penalty.isotropic(12)), beta, 0.5, 6).risk
    return ok_sum and abs(est.risk - asy) < 0.5 * asy


CHECKS = {
    "fixed point hand cases": _check_fixed_point,
    "shrink profile value": _check_shrink,
    "variance minimizer closed form": _check_variance_minimizer,
    "soft-selection worked optimum": _check_soft_optimum,
    "gradient vs finite differences": _check_gradient,
    "fine-grained terms telescope": _check_telescoping,
}


def run_selftest(echo=print) -> bool:
    ok_all = True
    for name, check in CHECKS.items():
        try:
            ok = bool(check())
        except Exception as err:  # a crash is a failed check
            ok = False
            name = f"{name} ({type(err).__name__}: {err})"
        ok_all &= ok
        echo(f"{'PASS' if ok else 'FAIL'}  {name}")
    return ok_all
