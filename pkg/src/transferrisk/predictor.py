"""Closed-form downstream fit in the ridgeless limit."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import Dataset
from .penalty import Limit, Penalty, RegularizationParams, Representation, build_penalty

PINV_RTOL = 1e-12


@dataclass(frozen=True, eq=False)
class FittedPredictor:
    beta: np.ndarray
    alpha: np.ndarray
    penalty: Optional[Penalty]
    n: int
    rank: int  # retained directions of X Gamma^{-1} X^T
    truncated: int  # directions dropped by the pseudo-inverse cutoff

    def predict(self, X: np.ndarray) -> np.ndarray:
        return X @ self.beta


def psd_pinv(K: np.ndarray, rtol: float = PINV_RTOL) -> tuple[np.ndarray, int]:
    """Pseudo-inverse of a symmetric PSD matrix and its numerical rank."""
    w, v = np.linalg.eigh(0.5 * (K + K.T))
    top = w.max() if w.size else 0.0
    keep = w > rtol * top if top > 0 else np.zeros_like(w, dtype=bool)
    inv = (v[:, keep] / w[keep]) @ v[:, keep].T
    return inv, int(keep.sum())


def min_penalty_interpolator(X: np.ndarray, y: np.ndarray, pen: Penalty):
    """beta = Gamma^{-1} X^T (X Gamma^{-1} X^T)^+ y, with rank bookkeeping."""
    GX = pen.gamma_inv @ X.T
    Kinv, rank = psd_pinv(X @ GX)
    return GX @ (Kinv @ y), rank


def feature_coefficients(rep: Representation, reg: RegularizationParams, beta: np.ndarray):
    """alpha = (B^T B + 2 lam_alpha / lam I)^{-1} B^T beta, or its limit."""
    B = rep.B
    if reg.limit == Limit.NO_FEATURES:
        return np.zeros(rep.k)
    return np.linalg.solve(B.T @ B + reg.ridge_shift * np.eye(rep.k), B.T @ beta)


def fit(data: Dataset, rep: Representation, reg: RegularizationParams) -> FittedPredictor:
    if reg.limit == Limit.STRONG:
        return fit_strong_featurization(data, rep)
    pen = build_penalty(rep, reg)
    beta, rank = min_penalty_interpolator(data.X, data.y, pen)
    return FittedPredictor(
        beta=beta,
        alpha=feature_coefficients(rep, reg, beta),
        penalty=pen,
        n=data.n,
        rank=rank,
        truncated=min(data.n, data.X.shape[1]) - rank,
    )


def fit_with_penalty(data: Dataset, pen: Penalty) -> FittedPredictor:
    """Fit for an explicit penalty (isotropic, spectrum-designed, ...); no alpha."""
    beta, rank = min_penalty_interpolator(data.X, data.y, pen)
    return FittedPredictor(
        beta=beta,
        alpha=np.zeros(0),
        penalty=pen,
        n=data.n,
        rank=rank,
        truncated=min(data.n, data.X.shape[1]) - rank,
    )


def fit_strong_featurization(data: Dataset, rep: Representation) -> FittedPredictor:
    """Regress on the features directly: alpha0 = (X B)^+ y, beta = B alpha0."""
    XB = data.X @ rep.B
    U, s, Vt = np.linalg.svd(XB, full_matrices=False)
    keep = s > PINV_RTOL * s[0] if s.size and s[0] > 0 else np.zeros_like(s, dtype=bool)
    alpha = Vt[keep].T @ ((U[:, keep].T @ data.y) / s[keep])
    return FittedPredictor(
        beta=rep.B @ alpha,
        alpha=alpha,
        penalty=None,
        n=data.n,
        rank=int(keep.sum()),
        truncated=int(s.size - keep.sum()),
    )


def fit_whitened(X: np.ndarray, y: np.ndarray, pen: Penalty) -> np.ndarray:
    """Same estimator through the whitened design X Gamma^{-1/2}."""
    A = pen.gamma_inv_sqrt
    return A @ (np.linalg.pinv(X @ A, rcond=PINV_RTOL) @ y)


def ridge_fit(X: np.ndarray, y: np.ndarray, gamma: np.ndarray, lam0: float) -> np.ndarray:
    """Generalized ridge at finite lam0: (X^T X + lam0 Gamma)^{-1} X^T y."""
    return np.linalg.solve(X.T @ X + lam0 * gamma, X.T @ y)


def joint_loss(
    beta: np.ndarray,
    alpha: np.ndarray,
    X: np.ndarray,
    y: np.ndarray,
    B: np.ndarray,
    reg: RegularizationParams,
    lam0: float,
) -> float:
    """Least squares plus the featurization-coupled penalty at finite lam0."""
    fit_term = np.sum((y - X @ beta) ** 2)
    pen = (
        reg.lam * np.sum((beta - B @ alpha) ** 2)
        + reg.lam_alpha * np.sum(alpha**2)
        + reg.lam_beta * np.sum(beta**2)
    )
    return float(fit_term + lam0 * pen)


def empirical_risk(beta_hat: np.ndarray, beta_star: np.ndarray, sigma: np.ndarray) -> float:
    """Excess prediction risk (beta_hat - beta_star)^T Sigma (beta_hat - beta_star)."""
    e = beta_hat - beta_star
    return float(e @ sigma @ e)
