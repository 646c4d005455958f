"""Monte Carlo risk and its bias-variance decompositions.

Only the design X is sampled. The fitted coefficient is affine in the label
noise, ``beta_hat = m(X) + A(X) eps``, so every expectation over eps is taken in
closed form:

* semi-classical: conditional on X, bias ``(beta - m)^T Sigma (beta - m)`` and
  variance ``sigma^2 tr(A^T Sigma A)``;
* fine-grained: bias of the averaged fit, variance over X, variance over eps
  and the interaction, estimated from N replicates so that they add up to the
  mean risk exactly.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .asymptotics import Regime, RegimeError, asymptotic_risk
from .model import CovarianceModel, stream
from .penalty import Penalty
from .predictor import PINV_RTOL

REPLICATE_KEY = 2


def _whitened_pinv(X: np.ndarray, pen: Penalty) -> np.ndarray:
    """A(X) = Gamma^{-1/2} (X Gamma^{-1/2})^+ (p x n)."""
    Ai = pen.gamma_inv_sqrt
    return Ai @ np.linalg.pinv(X @ Ai, rcond=PINV_RTOL)


def projection_operator(X: np.ndarray, pen: Penalty) -> np.ndarray:
    """(Xw^T Xw)^+ Xw^T Xw for the whitened design Xw = X Gamma^{-1/2}."""
    Xw = X @ pen.gamma_inv_sqrt
    return np.linalg.pinv(Xw, rcond=PINV_RTOL) @ Xw


def sc_decomposition(
    X: np.ndarray, pen: Penalty, beta: np.ndarray, sigma: np.ndarray, noise_var: float
) -> tuple[float, float]:
    """Semi-classical (bias, variance) conditional on the design X."""
    A = _whitened_pinv(X, pen)
    e = beta - A @ (X @ beta)
    return float(e @ sigma @ e), float(noise_var * np.sum(A * (sigma @ A)))


@dataclass(frozen=True)
class DecompositionEstimate:
    N: int
    risk: float
    risk_se: float
    bias_sc: float
    var_sc: float
    bias: float
    var_x: float
    var_eps: float
    var_xeps: float
    se: dict  # jackknife standard errors keyed by component name

    @property
    def telescoped(self) -> float:
        return self.bias + self.var_x + self.var_eps + self.var_xeps


def _pool_map(fn: Callable, items: Iterable, threads: int):
    if threads <= 1:
        return map(fn, items)
    ex = ThreadPoolExecutor(max_workers=threads)
    try:
        return list(ex.map(fn, items))
    finally:
        ex.shutdown()


def _jackknife_se(loo: np.ndarray) -> float:
    N = loo.size
    return float(np.sqrt((N - 1) / N * np.sum((loo - loo.mean()) ** 2)))


def fg_estimates(
    cov: CovarianceModel,
    pen: Penalty,
    beta: np.ndarray,
    noise_var: float,
    n: int,
    N: int,
    seed: int,
    threads: int = 1,
) -> DecompositionEstimate:
    """Fine-grained decomposition from N design replicates.

    Replicate j draws its design from ``stream(seed, REPLICATE_KEY, j)``, so
    the result does not depend on ``threads``. Designs for different n share
    leading rows (common random numbers along a risk curve).
    """
    if N < 2:
        raise ValueError("need at least two replicates")
    sig = cov.sigma
    root = cov.sqrt

    def one(j):
        Z = stream(seed, REPLICATE_KEY, j).standard_normal((n, cov.p))
        X = Z @ root
        A = _whitened_pinv(X, pen)
        m = A @ (X @ beta)
        e = beta - m
        SA = sig @ A
        return m, A, float(e @ sig @ e), float(np.sum(A * SA))

    ms, As, b_sc, tr = [], [], np.empty(N), np.empty(N)
    for j, (m, A, b, t) in enumerate(_pool_map(one, range(N), threads)):
        ms.append(m)
        As.append(A)
        b_sc[j], tr[j] = b, t
    v_sc = noise_var * tr
    M = np.stack(ms)  # N x p
    m_bar = M.mean(axis=0)
    A_bar = sum(As) / N

    def bias_of(mean_m):
        e = beta - mean_m
        return float(e @ sig @ e)

    bias = bias_of(m_bar)
    var_x = float(b_sc.mean() - bias)
    SA_bar = sig @ A_bar
    tr_bar = float(np.sum(A_bar * SA_bar))
    var_eps = noise_var * tr_bar
    var_xeps = float(v_sc.mean() - var_eps)
    r = b_sc + v_sc

    # leave-one-out replicates of every estimator
    loo_m = (N * m_bar[None, :] - M) / (N - 1)
    loo_bias = np.array([bias_of(mm) for mm in loo_m])
    loo_bsc = (b_sc.sum() - b_sc) / (N - 1)
    loo_vsc = (v_sc.sum() - v_sc) / (N - 1)
    cross = np.array([np.sum(Aj * SA_bar) for Aj in As])  # tr(A_j^T Sigma A_bar)
    loo_veps = noise_var * (N**2 * tr_bar - 2 * N * cross + tr) / (N - 1) ** 2
    se = {
        "risk": _jackknife_se((r.sum() - r) / (N - 1)),
        "bias_sc": _jackknife_se(loo_bsc),
        "var_sc": _jackknife_se(loo_vsc),
        "bias": _jackknife_se(loo_bias),
        "var_x": _jackknife_se(loo_bsc - loo_bias),
        "var_eps": _jackknife_se(loo_veps),
        "var_xeps": _jackknife_se(loo_vsc - loo_veps),
    }
    return DecompositionEstimate(
        N=N,
        risk=float(r.mean()),
        risk_se=se["risk"],
        bias_sc=float(b_sc.mean()),
        var_sc=float(v_sc.mean()),
        bias=bias,
        var_x=var_x,
        var_eps=var_eps,
        var_xeps=var_xeps,
        se=se,
    )


def fg_estimates_sampled(
    cov: CovarianceModel,
    pen: Penalty,
    beta: np.ndarray,
    noise_var: float,
    n: int,
    N: int,
    K: int,
    seed: int,
) -> DecompositionEstimate:
    """Two-way ANOVA over N designs crossed with K shared noise draws.

    Reference estimator that samples eps explicitly; used to validate the
    closed-form-in-eps route.
    """
    sig = cov.sigma
    eps = np.sqrt(noise_var) * stream(seed, 3).standard_normal((K, n))
    fits = np.empty((N, K, cov.p))
    for j in range(N):
        X = stream(seed, REPLICATE_KEY, j).standard_normal((n, cov.p)) @ cov.sqrt
        A = _whitened_pinv(X, pen)
        fits[j] = (A @ (X @ beta))[None, :] + eps @ A.T

    def q(v):
        return np.einsum("...i,ij,...j->...", v, sig, v)

    grand = fits.mean(axis=(0, 1))
    row = fits.mean(axis=1)  # per design
    col = fits.mean(axis=0)  # per noise draw
    bias = float(q(beta - grand))
    var_x = float(q(row - grand).mean())
    var_eps = float(q(col - grand).mean())
    var_xeps = float(q(fits - row[:, None] - col[None] + grand).mean())
    per_design = q(fits - beta[None, None]).mean(axis=1)
    risk = float(per_design.mean())
    se = float(per_design.std(ddof=1) / np.sqrt(N))
    return DecompositionEstimate(
        N=N,
        risk=risk,
        risk_se=se,
        bias_sc=np.nan,
        var_sc=np.nan,
        bias=bias,
        var_x=var_x,
        var_eps=var_eps,
        var_xeps=var_xeps,
        se={"risk": se},
    )


RISK_CURVE_COLUMNS = [
    "n",
    "predictor",
    "R_mc",
    "R_mc_se",
    "R_asy",
    "B_fg",
    "Vx_fg",
    "Vxe_fg",
    "Ve_fg",
    "B_asy",
    "VB_asy",
    "V_asy",
    "status",
]


def asymptotic_row(cov, pen, beta, noise_var, n) -> dict:
    try:
        rep = asymptotic_risk(cov, pen, beta, noise_var, n)
    except RegimeError as err:
        nan = float("nan")
        return {"R_asy": nan, "B_asy": nan, "VB_asy": nan, "V_asy": nan, "status": err.regime.value}
    c = rep.components
    return {
        "R_asy": rep.risk,
        "B_asy": c["B"],
        "VB_asy": c["V_X"],
        "V_asy": c["V_Xe"],
        "status": "ok" if rep.regime == Regime.SAMPLE_DEFICIENT else "ok_sample_rich",
    }


def risk_curve(
    cov: CovarianceModel,
    predictors: dict[str, Penalty],
    beta: np.ndarray,
    noise_var: float,
    n_grid: Sequence[int],
    N: int,
    seed: int,
    threads: int = 1,
) -> list[dict]:
    """Rows with the columns of ``RISK_CURVE_COLUMNS``, one per (n, predictor)."""
    rows = []
    for n in n_grid:
        for name, pen in predictors.items():
            est = fg_estimates(cov, pen, beta, noise_var, int(n), N, seed, threads)
            row = {
                "n": int(n),
                "predictor": name,
                "R_mc": est.risk,
                "R_mc_se": est.risk_se,
                "B_fg": est.bias,
                "Vx_fg": est.var_x,
                "Vxe_fg": est.var_xeps,
                "Ve_fg": est.var_eps,
            }
            row.update(asymptotic_row(cov, pen, beta, noise_var, int(n)))
            rows.append({k: row[k] for k in RISK_CURVE_COLUMNS})
    return rows
