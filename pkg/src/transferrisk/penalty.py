"""Generalized ridge penalty induced by a pretrained representation.

A representation ``B`` (p x k) with regularization ``(lam_alpha, lam_beta, lam)``
induces the penalty matrix ``Gamma = U diag(r) U^T`` where ``U`` holds the left
singular vectors of ``B`` and ``r_i = shrink_profile(d_i^2)``. Directions that
``B`` spans strongly get a small penalty; its null directions get the largest one.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import Optional

import numpy as np

SINGULAR_RTOL = 1e-14


class Limit(str, Enum):
    NONE = "none"
    NO_FEATURES = "no_features"  # lam -> 0 or lam_alpha -> 0: Gamma = lam_beta * I
    STRONG = "strong"  # lam -> inf, lam_beta -> 0: beta restricted to range(B)


@dataclass(frozen=True)
class RegularizationParams:
    lam_alpha: float = 1.0
    lam_beta: float = 1.0
    lam: float = 1.0
    limit: Limit = Limit.NONE

    def __post_init__(self):
        vals = (self.lam_alpha, self.lam_beta, self.lam)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"regularization must be finite, got {vals}")
        if self.lam_alpha <= 0 or self.lam <= 0 or self.lam_beta < 0:
            raise ValueError(
                f"need lam_alpha > 0, lam > 0, lam_beta >= 0; got {vals}"
            )
        if self.limit == Limit.NO_FEATURES and self.lam_beta <= 0:
            raise ValueError("the no-feature limit needs lam_beta > 0")

    @classmethod
    def no_features(cls, lam_beta: float = 1.0) -> "RegularizationParams":
        return cls(lam_beta=lam_beta, limit=Limit.NO_FEATURES)

    @classmethod
    def strong(cls, lam_alpha: float = 1.0) -> "RegularizationParams":
        return cls(lam_alpha=lam_alpha, lam_beta=0.0, limit=Limit.STRONG)

    @property
    def ridge_shift(self) -> float:
        """The 2 lam_alpha / lam added to B^T B in the feature-coefficient solve."""
        return 2.0 * self.lam_alpha / self.lam


def shrink_profile(d2, reg: RegularizationParams) -> np.ndarray:
    """Penalty eigenvalue for squared singular value ``d2`` (``inf`` allowed)."""
    d2 = np.asarray(d2, dtype=float)
    if reg.limit == Limit.NO_FEATURES:
        return np.full_like(d2, reg.lam_beta)
    a = reg.lam_alpha / reg.lam
    with np.errstate(invalid="ignore", divide="ignore"):
        u = d2 + 2 * a
        r = reg.lam_beta + reg.lam_alpha * (u + 2 * a) / u**2
    return np.where(np.isinf(d2), reg.lam_beta, r)


def shrink_profile_partials(d2: np.ndarray, lam_alpha: float, lam_beta: float, lam: float):
    """Partial derivatives of the profile w.r.t. (d2, lam_alpha, lam_beta, lam)."""
    d2 = np.asarray(d2, dtype=float)
    a = lam_alpha / lam
    u = d2 + 2 * a
    dr_dd2 = -lam_alpha * (1 / u**2 + 4 * a / u**3)
    dr_da = -8 * lam_alpha * a / u**3
    dr_dlam_alpha = (u + 2 * a) / u**2 + dr_da / lam
    dr_dlam_beta = np.ones_like(d2)
    dr_dlam = dr_da * (-lam_alpha / lam**2)
    return dr_dd2, dr_dlam_alpha, dr_dlam_beta, dr_dlam


@dataclass(frozen=True, eq=False)
class Representation:
    """``B = U D O^T`` with a full p x p left factor; ``d`` has length p."""

    B: np.ndarray
    U: np.ndarray
    d: np.ndarray
    O: np.ndarray

    @classmethod
    def from_matrix(cls, B: np.ndarray) -> "Representation":
        B = np.atleast_2d(np.asarray(B, dtype=float))
        p, k = B.shape
        U, s, Ot = np.linalg.svd(B, full_matrices=True)
        d = np.zeros(p)
        d[: s.size] = s
        return cls(B=B, U=U, d=d, O=Ot.T)

    @property
    def p(self) -> int:
        return self.B.shape[0]

    @property
    def k(self) -> int:
        return self.B.shape[1]


@dataclass(frozen=True, eq=False)
class Penalty:
    """``Gamma = basis diag(r) basis^T``; ``r`` may hold ``inf`` (fully suppressed direction)."""

    r: np.ndarray
    basis: np.ndarray
    rep: Optional[Representation] = None

    def __post_init__(self):
        r = self.r
        if np.any(np.isnan(r)) or np.any(r <= 0):
            raise ValueError("penalty eigenvalues must be positive")
        fin = r[np.isfinite(r)]
        if fin.size and fin.min() <= SINGULAR_RTOL * fin.max():
            raise ValueError(
                f"penalty is numerically singular (min {fin.min():.3e}, max {fin.max():.3e})"
            )

    @property
    def p(self) -> int:
        return self.r.size

    @property
    def finite(self) -> bool:
        return bool(np.all(np.isfinite(self.r)))

    def _apply(self, f: np.ndarray) -> np.ndarray:
        return (self.basis * f) @ self.basis.T

    @cached_property
    def gamma(self) -> np.ndarray:
        self._need_finite()
        return self._apply(self.r)

    @cached_property
    def gamma_sqrt(self) -> np.ndarray:
        self._need_finite()
        return self._apply(np.sqrt(self.r))

    @cached_property
    def gamma_inv(self) -> np.ndarray:
        return self._apply(1.0 / self.r)

    @cached_property
    def gamma_inv_sqrt(self) -> np.ndarray:
        return self._apply(1.0 / np.sqrt(self.r))

    def _need_finite(self):
        if not self.finite:
            raise ValueError("penalty has infinite directions; only inverse forms exist")

    @classmethod
    def isotropic(cls, p: int, value: float = 1.0) -> "Penalty":
        return cls(r=np.full(p, float(value)), basis=np.eye(p))


def build_penalty(rep: Representation, reg: RegularizationParams) -> Penalty:
    if reg.limit == Limit.STRONG:
        raise ValueError(
            "strong featurization has no invertible penalty; use predictor.fit_strong_featurization"
        )
    return Penalty(r=shrink_profile(rep.d**2, reg), basis=rep.U, rep=rep)


def penalty_closed_form(B: np.ndarray, reg: RegularizationParams) -> np.ndarray:
    """Gamma from the matrix expression, without an SVD (used as a cross-check)."""
    p, k = B.shape
    G = np.linalg.inv(B.T @ B + reg.ridge_shift * np.eye(k))
    proj = np.eye(p) - B @ G @ B.T
    return reg.lam * proj @ proj + reg.lam_alpha * B @ G @ G @ B.T + reg.lam_beta * np.eye(p)
