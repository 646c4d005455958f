"""Problem instances and the random generators used by the experiments.

Everything random takes an explicit ``numpy.random.Generator``. Use
:func:`stream` to derive independent, order-free streams from a base seed
and a tuple of integer keys (grid index, replicate index, ...), so that a
replicate draws the same numbers whether it runs serially or on a pool.
"""
from __future__ import annotations

import warnings
from functools import cached_property
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

RANK_RTOL = 1e-10
PSD_CLAMP_RTOL = 1e-12


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent RNG stream for ``(seed, *keys)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def sym_eigh(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs of a symmetric matrix, eigenvalues in descending order."""
    a = 0.5 * (a + a.T)
    w, v = np.linalg.eigh(a)
    return w[::-1].copy(), v[:, ::-1].copy()


def psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = sym_eigh(a)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


# --------------------------------------------------------------------------- covariances


@dataclass(frozen=True)
class CovarianceSpec:
    kind: str  # ar1 | wishart_jitter | identity | explicit
    p: int = 0
    rho: float = 0.0
    m: int = 0
    jitter: float = 0.0
    matrix: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class CovarianceModel:
    sigma: np.ndarray
    eigvals: np.ndarray  # descending, clamped at 0
    eigvecs: np.ndarray  # columns
    rank: int

    @property
    def p(self) -> int:
        return self.sigma.shape[0]

    @property
    def eta_min_pos(self) -> float:
        return float(self.eigvals[self.rank - 1]) if self.rank else 0.0

    @cached_property
    def sqrt(self) -> np.ndarray:
        return (self.eigvecs * np.sqrt(self.eigvals)) @ self.eigvecs.T

    @classmethod
    def from_matrix(cls, sigma: np.ndarray) -> "CovarianceModel":
        sigma = np.asarray(sigma, dtype=float)
        if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
            raise ValueError(f"covariance must be square, got shape {sigma.shape}")
        scale = max(np.abs(sigma).max(), np.finfo(float).tiny)
        if np.abs(sigma - sigma.T).max() > 1e-12 * scale:
            raise ValueError("covariance is not symmetric")
        sigma = 0.5 * (sigma + sigma.T)
        w, v = sym_eigh(sigma)
        top = max(w[0], 0.0)
        if w[-1] < -PSD_CLAMP_RTOL * max(top, scale):
            raise ValueError(
                f"covariance is not PSD: most negative eigenvalue {w[-1]:.3e}"
            )
        w = np.clip(w, 0.0, None)
        rank = int(np.sum(w > RANK_RTOL * top)) if top > 0 else 0
        return cls(sigma=sigma, eigvals=w, eigvecs=v, rank=rank)


def ar1_matrix(rho: float, p: int) -> np.ndarray:
    idx = np.arange(p)
    return rho ** np.abs(idx[:, None] - idx[None, :]).astype(float)


def make_covariance(
    spec: CovarianceSpec, rng: Optional[np.random.Generator] = None
) -> CovarianceModel:
    if spec.kind == "identity":
        return CovarianceModel.from_matrix(np.eye(spec.p))
    if spec.kind == "ar1":
        if not abs(spec.rho) < 1:
            raise ValueError("ar1 requires |rho| < 1")
        return CovarianceModel.from_matrix(ar1_matrix(spec.rho, spec.p))
    if spec.kind == "wishart_jitter":
        if rng is None:
            raise ValueError("wishart_jitter needs an rng")
        w = rng.standard_normal((spec.p, spec.m))
        return CovarianceModel.from_matrix(w @ w.T / spec.m + spec.jitter * np.eye(spec.p))
    if spec.kind == "explicit":
        if spec.matrix is None:
            raise ValueError("explicit covariance needs a matrix")
        return CovarianceModel.from_matrix(spec.matrix)
    raise ValueError(f"unknown covariance kind {spec.kind!r}")


def norm_report(
    cov: CovarianceModel, gamma_eigs: Optional[np.ndarray] = None, threshold: float = 1e6
) -> dict:
    """The four conditioning quantities a bounded-geometry assumption would cap.

    Only reported (and warned about above ``threshold``); nothing is gated on them.
    """
    out = {
        "inv_eta_min_pos": 1.0 / cov.eta_min_pos if cov.eta_min_pos > 0 else np.inf,
        "sigma_norm": float(cov.eigvals[0]),
    }
    if gamma_eigs is not None:
        finite = gamma_eigs[np.isfinite(gamma_eigs)]
        out["gamma_norm"] = float(gamma_eigs.max())
        out["gamma_inv_norm"] = float(1.0 / finite.min()) if finite.size else np.inf
    big = {k: v for k, v in out.items() if v > threshold}
    if big:
        warnings.warn(f"ill-conditioned instance: {big}", stacklevel=2)
    return out


# --------------------------------------------------------------------------- representation / tasks


@dataclass(frozen=True, eq=False)
class GroundTruthRepresentation:
    B: np.ndarray  # p x q, columns are the source-task coefficient vectors

    @property
    def p(self) -> int:
        return self.B.shape[0]

    @property
    def q(self) -> int:
        return self.B.shape[1]

    def gram_eigh(self) -> tuple[np.ndarray, np.ndarray]:
        """Eigenpairs of B B^T, descending."""
        return sym_eigh(self.B @ self.B.T)


def sample_ground_truth(
    p: int, q: int, column_cov: np.ndarray, rng: np.random.Generator
) -> GroundTruthRepresentation:
    """Columns drawn i.i.d. from N(0, column_cov)."""
    z = rng.standard_normal((p, q))
    return GroundTruthRepresentation(psd_sqrt(np.asarray(column_cov, float)) @ z)


def calibrate_snr(
    B: np.ndarray, alpha_cov: np.ndarray, noise_var: float, target_snr: float
) -> float:
    """Prior scale c with E||beta||^2 / sigma^2 = target_snr^2.

    The task prior is alpha = q^{-1/2} (c * alpha_cov)^{1/2} xi, so that
    E||beta||^2 = (c / q) tr(B alpha_cov B^T).
    """
    q = B.shape[1]
    tr = float(np.trace(B @ alpha_cov @ B.T))
    if tr <= 0:
        raise ValueError("uninformative representation: tr(B alpha_cov B^T) = 0")
    return target_snr**2 * noise_var * q / tr


@dataclass(frozen=True, eq=False)
class TaskModel:
    alpha_cov: np.ndarray  # q x q shape of the prior
    scale: float  # c
    noise_var: float  # sigma^2

    @property
    def prior_cov(self) -> np.ndarray:
        """Covariance of sqrt(q) * alpha."""
        return self.scale * self.alpha_cov


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    cov: CovarianceModel
    truth: GroundTruthRepresentation
    task: TaskModel

    @property
    def p(self) -> int:
        return self.cov.p

    @property
    def q(self) -> int:
        return self.truth.q

    @property
    def noise_var(self) -> float:
        return self.task.noise_var


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    eps: np.ndarray
    Z: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.X.shape[0]


def sample_task(
    instance: ProblemInstance, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    q = instance.q
    xi = rng.standard_normal(q)
    alpha = psd_sqrt(instance.task.prior_cov) @ xi / np.sqrt(q)
    return alpha, instance.truth.B @ alpha


def sample_data(
    instance: ProblemInstance, beta: np.ndarray, n: int, rng: np.random.Generator
) -> Dataset:
    """Rows x_i = Sigma^{1/2} z_i with z_i standard normal; y = X beta + eps."""
    p = instance.p
    Z = rng.standard_normal((n, p))
    X = Z @ instance.cov.sqrt
    eps = np.sqrt(instance.noise_var) * rng.standard_normal(n)
    return Dataset(X=X, y=X @ beta + eps, eps=eps, Z=Z)
