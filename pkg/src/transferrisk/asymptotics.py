"""Deterministic-equivalent risk of the ridgeless generalized-ridge predictor.

Everything is computed from the whitened spectrum: the eigensystem
``Gamma^{-1/2} Sigma Gamma^{-1/2} = sum_i t_i w_i w_i^T``. With fewer samples than
whitened directions (n < h) a scalar fixed point b0 determines the variance
factor and the bias; with n > h only noise variance survives.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .model import CovarianceModel, sym_eigh
from .penalty import Penalty

SPECTRUM_RTOL = 1e-10
B0_MAX_ITER = 100
B0_RTOL = 1e-12


class Regime(str, Enum):
    SAMPLE_DEFICIENT = "sample_deficient"  # n < h
    SAMPLE_RICH = "sample_rich"  # n > h
    BOUNDARY = "boundary"  # n == h


class RegimeError(ValueError):
    def __init__(self, regime: Regime, n: int, h: int, msg: str = ""):
        self.regime, self.n, self.h = regime, n, h
        super().__init__(msg or f"{regime.value} regime (n={n}, h={h})")


class FixedPointError(ArithmeticError):
    pass


def regime_of(n: int, h: int) -> Regime:
    if n < h:
        return Regime.SAMPLE_DEFICIENT
    if n > h:
        return Regime.SAMPLE_RICH
    return Regime.BOUNDARY


@dataclass(frozen=True, eq=False)
class WhitenedSpectrum:
    """Eigensystem of the whitened covariance, restricted to its support.

    ``t`` holds the h positive eigenvalues (descending), ``W`` the matching
    eigenvectors, and ``Z = Gamma^{1/2} W`` the vectors that pair with a target
    ``beta`` in the bias. ``W``/``Z`` may be ``None`` for spectrum-only use.
    """

    t: np.ndarray
    W: Optional[np.ndarray] = None
    Z: Optional[np.ndarray] = None
    p: int = 0
    # P Sigma P for the directions an infinite penalty removes (None if there are none);
    # they are never fitted, so their signal counts as bias with x = 1
    suppressed: Optional[np.ndarray] = None

    @property
    def h(self) -> int:
        return self.t.size

    @property
    def t_max(self) -> float:
        return float(self.t[0])

    @property
    def t_min_pos(self) -> float:
        return float(self.t[-1])

    @classmethod
    def from_values(cls, t) -> "WhitenedSpectrum":
        t = np.sort(np.asarray(t, dtype=float))[::-1]
        if t.size == 0 or t[0] <= 0:
            return cls(t=np.zeros(0), p=t.size)
        return cls(t=t[t > SPECTRUM_RTOL * t[0]], p=t.size)


def _suppressed_block(cov: CovarianceModel, pen: Penalty) -> Optional[np.ndarray]:
    dead = np.isinf(pen.r)
    if not dead.any():
        return None
    Pk = pen.basis[:, dead] @ pen.basis[:, dead].T
    leak = Pk @ cov.sigma @ (np.eye(cov.p) - Pk)
    if np.abs(leak).max() > 1e-9 * max(cov.eigvals[0], 1e-300):
        raise ValueError("infinite penalty directions must span a Sigma-invariant subspace")
    return Pk @ cov.sigma @ Pk


def whiten(cov: CovarianceModel, pen: Penalty) -> WhitenedSpectrum:
    A = pen.gamma_inv_sqrt
    t, W = sym_eigh(A @ cov.sigma @ A)
    supp = _suppressed_block(cov, pen)
    if t[0] <= 0:
        return WhitenedSpectrum(t=np.zeros(0), W=W[:, :0], Z=W[:, :0], p=cov.p, suppressed=supp)
    keep = t > SPECTRUM_RTOL * t[0]
    t, W = t[keep], W[:, keep]
    if pen.finite:
        Z = pen.gamma_sqrt @ W
    else:
        # Gamma^{1/2} w = Sigma Gamma^{-1/2} w / t stays finite when Gamma has inf directions
        Z = cov.sigma @ (A @ W) / t
    return WhitenedSpectrum(t=t, W=W, Z=Z, p=cov.p, suppressed=supp)


def solve_b0(spectrum, n: int) -> float:
    """Root of sum_{i in H} 1/(1 + t_i b) = h - n for n < h.

    Safeguarded Newton inside the bracket n/((h-n) t_max) <= b0 <= n/((h-n) t_min);
    the residual is what decides convergence.
    """
    t = spectrum.t if isinstance(spectrum, WhitenedSpectrum) else np.asarray(spectrum, float)
    h = t.size
    if n >= h:
        reg = regime_of(n, h)
        raise RegimeError(reg, n, h, f"no fixed point for n={n} >= h={h}; use the sample-rich risk")
    if n <= 0:
        return 0.0
    target = h - n
    lo = n / (target * t.max())
    hi = n / (target * t.min())
    tol = B0_RTOL * h

    def resid(b):
        x = 1.0 / (1.0 + t * b)
        return x.sum() - target, -np.sum(t * x * x)

    b = lo
    f, df = resid(b)
    for _ in range(B0_MAX_ITER):
        if abs(f) <= tol:
            # one polishing step; keep it only if it helps
            b2 = b - f / df
            f2, _ = resid(b2)
            return float(b2) if abs(f2) < abs(f) else float(b)
        if f > 0:
            lo = b
        else:
            hi = b
        step = b - f / df
        b = step if lo < step < hi else np.sqrt(lo * hi)
        f, df = resid(b)
    if abs(f) <= tol:
        return float(b)
    raise FixedPointError(f"b0 did not converge: residual {f:.3e} after {B0_MAX_ITER} steps")


def variance_factor(t: np.ndarray, b0: float) -> float:
    tb = t * b0
    return float(np.sum(tb**2 / (1 + tb) ** 2) / np.sum(tb / (1 + tb) ** 2))


def variance_from_x(x: np.ndarray, n: int, h: int) -> float:
    """Same factor written through x_i = 1/(1 + t_i b0)."""
    s = float(np.sum(x**2))
    return (2 * n - h + s) / (h - n - s)


@dataclass(frozen=True)
class AsymptoticReport:
    regime: Regime
    n: int
    h: int
    noise_var: float
    b0: float = np.nan
    variance: float = np.nan  # V-factor, multiplies sigma^2 and the bias
    bias: float = 0.0
    risk: float = np.nan
    components: dict = field(default_factory=dict)  # B, V_X, V_Xe, V_e limits

    @property
    def rich_risk(self) -> float:
        return self.risk if self.regime == Regime.SAMPLE_RICH else np.nan


def _rich_risk(h: int, n: int, noise_var: float, unfit: float = 0.0) -> float:
    # unfitted signal is both bias and extra label noise
    return unfit + (noise_var + unfit) * h / (n - h)


def _rich_report(h: int, n: int, noise_var: float, unfit: float = 0.0) -> AsymptoticReport:
    u = noise_var * h / (n - h)
    return AsymptoticReport(
        regime=Regime.SAMPLE_RICH,
        n=n,
        h=h,
        noise_var=noise_var,
        bias=unfit,
        risk=_rich_risk(h, n, noise_var, unfit),
        components={"B": unfit, "V_X": unfit * h / (n - h), "V_Xe": u, "V_e": 0.0},
    )


def _unfit(spec: WhitenedSpectrum, beta: np.ndarray) -> float:
    return 0.0 if spec.suppressed is None else float(beta @ spec.suppressed @ beta)


def _check_regime(spec: WhitenedSpectrum, n: int) -> Regime:
    reg = regime_of(n, spec.h)
    if reg == Regime.BOUNDARY:
        raise RegimeError(reg, n, spec.h, f"n = h = {n}: the risk diverges")
    return reg


def risk_components(
    spec: WhitenedSpectrum, beta: np.ndarray, noise_var: float, n: int
) -> AsymptoticReport:
    if _check_regime(spec, n) == Regime.SAMPLE_RICH:
        return _rich_report(spec.h, n, noise_var, _unfit(spec, beta))
    b0 = solve_b0(spec, n)
    V = variance_factor(spec.t, b0)
    x = 1.0 / (1.0 + spec.t * b0)
    proj = spec.Z.T @ beta
    bias = float(np.sum(spec.t * proj**2 * x**2)) + _unfit(spec, beta)
    return AsymptoticReport(
        regime=Regime.SAMPLE_DEFICIENT,
        n=n,
        h=spec.h,
        noise_var=noise_var,
        b0=b0,
        variance=V,
        bias=bias,
        risk=bias + V * bias + noise_var * V,
        components={"B": bias, "V_X": V * bias, "V_Xe": noise_var * V, "V_e": 0.0},
    )


def task_risks(spec: WhitenedSpectrum, betas: np.ndarray, noise_var: float, n: int) -> np.ndarray:
    """Asymptotic risk for each column of ``betas`` (p x m), sharing one b0 solve."""
    betas = np.asarray(betas, float)
    unfit = np.zeros(betas.shape[1])
    if spec.suppressed is not None:
        unfit = np.einsum("ij,ij->j", betas, spec.suppressed @ betas)
    if _check_regime(spec, n) == Regime.SAMPLE_RICH:
        return _rich_risk(spec.h, n, noise_var, unfit)
    b0, V, g = _bias_weights(spec, n)
    bias = g @ (spec.Z.T @ betas) ** 2 + unfit
    return bias * (1 + V) + noise_var * V


def asymptotic_risk(
    cov: CovarianceModel, pen: Penalty, beta: np.ndarray, noise_var: float, n: int
) -> AsymptoticReport:
    return risk_components(whiten(cov, pen), beta, noise_var, n)


@dataclass(frozen=True)
class ObjectiveValue:
    bias: float  # averaged or worst-case bias term
    risk: float
    variance: float
    b0: float
    regime: Regime


def _bias_weights(spec: WhitenedSpectrum, n: int):
    b0 = solve_b0(spec, n)
    x = 1.0 / (1.0 + spec.t * b0)
    return b0, variance_factor(spec.t, b0), spec.t * x**2


def averaged_objective(
    spec: WhitenedSpectrum,
    B_star: np.ndarray,
    prior_cov: np.ndarray,
    noise_var: float,
    n: int,
    q: Optional[int] = None,
) -> ObjectiveValue:
    """Risk averaged over tasks alpha with covariance prior_cov / q."""
    q = B_star.shape[1] if q is None else q
    unfit = 0.0
    if spec.suppressed is not None:
        unfit = float(np.sum((spec.suppressed @ B_star) * (B_star @ prior_cov))) / q
    if _check_regime(spec, n) == Regime.SAMPLE_RICH:
        r = _rich_risk(spec.h, n, noise_var, unfit)
        return ObjectiveValue(unfit, r, np.nan, np.nan, Regime.SAMPLE_RICH)
    b0, V, g = _bias_weights(spec, n)
    E = spec.Z.T @ B_star  # h x q
    bias = float(np.einsum("i,ij,jk,ik->", g, E, prior_cov, E)) / q + unfit
    return ObjectiveValue(bias, bias * (1 + V) + noise_var * V, V, b0, Regime.SAMPLE_DEFICIENT)


def worst_case_matrix(spec: WhitenedSpectrum, B_star: np.ndarray, n: int) -> np.ndarray:
    M = np.zeros((B_star.shape[1],) * 2)
    if spec.h > n:
        _, _, g = _bias_weights(spec, n)
        E = spec.Z.T @ B_star
        M = (E * g[:, None]).T @ E
    if spec.suppressed is not None:
        M = M + B_star.T @ spec.suppressed @ B_star
    return 0.5 * (M + M.T)


def worst_case_objective(
    spec: WhitenedSpectrum, B_star: np.ndarray, noise_var: float, n: int, radius2: float
) -> ObjectiveValue:
    """Risk maximized over tasks with ||alpha||^2 <= radius2."""
    reg = _check_regime(spec, n)
    M = worst_case_matrix(spec, B_star, n)
    bias = radius2 * float(np.linalg.eigvalsh(M)[-1]) if M.size else 0.0
    if reg == Regime.SAMPLE_RICH:
        r = _rich_risk(spec.h, n, noise_var, bias)
        return ObjectiveValue(bias, r, np.nan, np.nan, Regime.SAMPLE_RICH)
    b0, V, _ = _bias_weights(spec, n)
    return ObjectiveValue(bias, noise_var * V + (V + 1) * bias, V, b0, Regime.SAMPLE_DEFICIENT)


def variance_upper_bound(spec: WhitenedSpectrum, n: int) -> float:
    return (spec.t_max / spec.t_min_pos - 1) / (spec.h / n - 1) + 1
