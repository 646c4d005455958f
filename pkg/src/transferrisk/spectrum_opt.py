"""Optimal penalty spectra when the penalty shares the covariance eigenbasis.

With ``Gamma = sum_i r_i u_i u_i^T`` (``u_i`` the eigenvectors of Sigma) the
risk depends on the weights only through ``x_i = 1/(1 + eta_i b0 / r_i)``.
Fixing the free scale ``b0 = c`` turns the fixed-point equation into the linear
constraint ``sum x = h - n`` on the box ``[0, 1]^h``, and the variance factor,
the averaged bias and the worst-case bias all become convex in ``x``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .model import CovarianceModel, stream
from .penalty import Penalty

PHI_RTOL = 1e-12


class Selection(str, Enum):
    HARD = "hard"  # h1 <= n: zero bias is reachable
    SOFT = "soft"  # h1 > n: graded weights on the top h0 directions


class HardRegime(ValueError):
    """h0 is undefined because the aligned signal fits in n directions."""


@dataclass(frozen=True, eq=False)
class SpectrumProblem:
    """Aligned-basis data, every array ordered by decreasing phi = eta * theta."""

    eta: np.ndarray
    theta: np.ndarray
    phi: np.ndarray
    perm: np.ndarray  # position i holds covariance eigen-index perm[i]
    basis: np.ndarray  # p x h, columns u_perm[i]
    features: np.ndarray  # h x q, rows u_i^T B_star
    n: int
    q: int
    noise_var: float = 1.0
    radius2: float = 1.0  # scale of the worst-case task ball
    p: int = 0

    @property
    def h(self) -> int:
        return self.eta.size

    @property
    def h1(self) -> int:
        if self.phi.size == 0 or self.phi[0] <= 0:
            return 0
        return int(np.sum(self.phi > PHI_RTOL * self.phi[0]))

    @property
    def selection(self) -> Selection:
        return Selection.HARD if self.h1 <= self.n else Selection.SOFT


def alignment_coefficients(
    cov: CovarianceModel,
    B_star: np.ndarray,
    prior_cov: np.ndarray,
    n: int,
    noise_var: float = 1.0,
    radius2: float = 1.0,
) -> SpectrumProblem:
    h = cov.rank
    U = cov.eigvecs[:, :h]
    eta = cov.eigvals[:h]
    F = U.T @ B_star
    theta = np.clip(np.einsum("ij,jk,ik->i", F, prior_cov, F), 0.0, None)
    phi = eta * theta
    order = np.argsort(-phi, kind="stable")
    return SpectrumProblem(
        eta=eta[order],
        theta=theta[order],
        phi=phi[order],
        perm=order,
        basis=U[:, order],
        features=F[order],
        n=int(n),
        q=B_star.shape[1],
        noise_var=noise_var,
        radius2=radius2,
        p=cov.p,
    )


def problem_from_arrays(eta, phi, n: int, q: int = 1, noise_var: float = 1.0) -> SpectrumProblem:
    """Spectrum-only problem with identity basis (phi taken as given)."""
    eta = np.asarray(eta, float)
    phi = np.asarray(phi, float)
    order = np.argsort(-phi, kind="stable")
    h = eta.size
    theta = np.divide(phi, eta, out=np.zeros_like(phi), where=eta > 0)
    return SpectrumProblem(
        eta=eta[order],
        theta=theta[order],
        phi=phi[order],
        perm=order,
        basis=np.eye(h)[:, order],
        features=np.sqrt(theta[order])[:, None],
        n=int(n),
        q=q,
        noise_var=noise_var,
        p=h,
    )


# --------------------------------------------------------------------------- x-space


def to_x_space(r_hat: np.ndarray, eta: np.ndarray, c: float = 1.0) -> np.ndarray:
    r_hat = np.asarray(r_hat, float)
    with np.errstate(divide="ignore"):
        return np.where(np.isinf(r_hat), 1.0, 1.0 / (1.0 + eta * c / r_hat))


def from_x_space(x: np.ndarray, eta: np.ndarray, c: float = 1.0) -> np.ndarray:
    x = np.asarray(x, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = c * eta * x / (1.0 - x)
    return np.where(x >= 1.0, np.inf, r)


def is_feasible(x: np.ndarray, n: int, atol: float = 1e-10) -> bool:
    x = np.asarray(x, float)
    return bool(
        np.all(x >= -atol) and np.all(x <= 1 + atol) and abs(x.sum() - (x.size - n)) <= atol * max(1, x.size)
    )


def project_feasible(y: np.ndarray, n: int) -> np.ndarray:
    """Euclidean projection onto {x in [0,1]^h : sum x = h - n}."""
    y = np.asarray(y, float)
    h = y.size
    target = h - n
    if not 0 <= target <= h:
        raise ValueError(f"empty feasible set for h={h}, n={n}")
    lo, hi = y.min() - 1.0, y.max()
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.clip(y - mid, 0, 1).sum() > target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * max(1.0, abs(mid)):
            break
    nu = 0.5 * (lo + hi)
    # exact shift on the free set found by bisection
    z = y - nu
    ones = z >= 1
    free = (z > 0) & ~ones
    if free.any():
        nu = (y[free].sum() - (target - ones.sum())) / free.sum()
    return np.clip(y - nu, 0.0, 1.0)


# --------------------------------------------------------------------------- objectives


def variance_x(x: np.ndarray, n: int) -> float:
    h = x.size
    s = float(x @ x)
    den = h - n - s
    if den <= 0:
        return np.inf
    return (2 * n - h + s) / den


def variance_x_grad(x: np.ndarray, n: int) -> np.ndarray:
    den = x.size - n - float(x @ x)
    return 2 * n * x / den**2


def bias_avg_x(x: np.ndarray, prob: SpectrumProblem) -> float:
    return float(prob.phi @ x**2) / prob.q


def bias_avg_x_grad(x: np.ndarray, prob: SpectrumProblem) -> np.ndarray:
    return 2 * prob.phi * x / prob.q


def _worst_matrix(x: np.ndarray, prob: SpectrumProblem) -> np.ndarray:
    w = prob.eta * x**2
    F = prob.features
    return (F * w[:, None]).T @ F


def bias_worst_x(x: np.ndarray, prob: SpectrumProblem) -> float:
    M = _worst_matrix(x, prob)
    return prob.radius2 * float(np.linalg.eigvalsh(M)[-1])


def bias_worst_x_grad(x: np.ndarray, prob: SpectrumProblem) -> np.ndarray:
    _, V = np.linalg.eigh(_worst_matrix(x, prob))
    v = V[:, -1]
    return prob.radius2 * 2 * prob.eta * x * (prob.features @ v) ** 2


def _bias_pair(kind: str):
    if kind == "avg":
        return bias_avg_x, bias_avg_x_grad
    if kind == "worst":
        return bias_worst_x, bias_worst_x_grad
    raise ValueError(f"objective must be 'avg' or 'worst', got {kind!r}")


def direct_objective(x, prob: SpectrumProblem, kind: str = "avg") -> float:
    """Risk in x-space: avg B + (B + s2) V, worst s2 V + (V + 1) B."""
    V = variance_x(x, prob.n)
    if not np.isfinite(V):
        return np.inf
    B = _bias_pair(kind)[0](x, prob)
    return B + (B + prob.noise_var) * V


def relaxed_objective(x, prob: SpectrumProblem, kind: str = "avg") -> float:
    """Convex upper bound replacing V*B by ((V + B)/2)^2."""
    V = variance_x(x, prob.n)
    if not np.isfinite(V):
        return np.inf
    B = _bias_pair(kind)[0](x, prob)
    return B + (0.5 * (V + B)) ** 2 + prob.noise_var * V


def _objective_and_grad(x, prob: SpectrumProblem, kind: str, relaxed: bool):
    V = variance_x(x, prob.n)
    if not np.isfinite(V):
        return np.inf, None
    bf, bg = _bias_pair(kind)
    B, dB = bf(x, prob), bg(x, prob)
    dV = variance_x_grad(x, prob.n)
    s2 = prob.noise_var
    if relaxed:
        m = 0.5 * (V + B)
        return B + m * m + s2 * V, dB + m * (dV + dB) + s2 * dV
    return B + (B + s2) * V, dB * (1 + V) + (B + s2) * dV


# --------------------------------------------------------------------------- closed forms


def compute_h0(phi: np.ndarray, n: int) -> int:
    """Largest cutoff m in (n, h1] with phi_m * sum_{i<=m} 1/phi_i >= m - n."""
    phi = np.asarray(phi, float)
    if phi.size and np.any(np.diff(phi) > 0):
        raise ValueError("phi must be sorted in non-increasing order")
    h1 = int(np.sum(phi > PHI_RTOL * phi[0])) if phi.size and phi[0] > 0 else 0
    if n >= h1:
        raise HardRegime(f"h1={h1} <= n={n}: hard selection, h0 undefined")
    m = np.arange(1, h1 + 1)
    lhs = phi[:h1] * np.cumsum(1.0 / phi[:h1])
    ok = (m <= n) | (lhs >= m - n)
    return int(m[ok].max())


@dataclass(frozen=True, eq=False)
class SpectrumSolution:
    x: np.ndarray
    r_hat: np.ndarray  # in problem order; inf marks a fully suppressed direction
    selection: Selection
    value: float
    h0: Optional[int] = None
    c: float = 1.0
    converged: bool = True
    info: dict = field(default_factory=dict)


def minimize_variance_spectrum(eta: np.ndarray, n: int, h: Optional[int] = None, c: float = 1.0):
    eta = np.asarray(eta, float)
    h = eta.size if h is None else h
    if n >= h:
        raise ValueError(f"variance minimizer needs n < h (n={n}, h={h})")
    x = np.full(h, 1.0 - n / h)
    return SpectrumSolution(
        x=x,
        r_hat=c * eta[:h],
        selection=Selection.SOFT,
        value=1.0 / (h / n - 1.0),
        c=c,
    )


def minimize_bias_spectrum(prob: SpectrumProblem, c: float = 1.0) -> SpectrumSolution:
    """Closed-form minimizer of the averaged bias over aligned spectra."""
    h, n, h1 = prob.h, prob.n, prob.h1
    if h1 <= n:
        # any positive weights on the h1 signal directions, suppress the rest
        r = np.full(h, np.inf)
        r[:h1] = prob.eta[:h1]
        x = np.ones(h)
        x[:h1] = 0.0
        if h > h1:
            x[h1:] = (h - n) / (h - h1)
        return SpectrumSolution(x=x, r_hat=r, selection=Selection.HARD, value=0.0, c=c)
    h0 = compute_h0(prob.phi, n)
    inv = 1.0 / prob.phi[:h0]
    x = np.ones(h)
    x[:h0] = (h0 - n) / (prob.phi[:h0] * inv.sum())
    value = (prob.phi[h0:h1].sum() + (h0 - n) ** 2 / inv.sum()) / prob.q
    return SpectrumSolution(
        x=x,
        r_hat=from_x_space(x, prob.eta, c),
        selection=Selection.SOFT,
        value=float(value),
        h0=h0,
        c=c,
    )


def hard_selection_weights(prob: SpectrumProblem, rho: float) -> np.ndarray:
    """Finite weights approaching the hard-selection optimum as rho -> 0."""
    r = prob.eta / rho
    r[: prob.h1] = prob.eta[: prob.h1]
    return r


def spectrum_penalty(prob: SpectrumProblem, r_hat: np.ndarray, fill: float = 1.0) -> Penalty:
    """Penalty with weights r_hat on the aligned directions and ``fill`` on ker(Sigma)."""
    p = prob.p or prob.basis.shape[0]
    basis = prob.basis
    r = np.asarray(r_hat, float)
    if basis.shape[1] < p:
        Q, _ = np.linalg.qr(basis, mode="complete")
        basis = np.hstack([basis, Q[:, basis.shape[1] :]])
        r = np.concatenate([r, np.full(p - r.size, fill)])
    return Penalty(r=r, basis=basis)


# --------------------------------------------------------------------------- iterative solvers


def _projected_gradient(x0, prob, kind, relaxed, max_iter, tol):
    x = project_feasible(x0, prob.n)
    f, g = _objective_and_grad(x, prob, kind, relaxed)
    step = 1.0
    for it in range(max_iter):
        while True:
            y = project_feasible(x - step * g, prob.n)
            fy, gy = _objective_and_grad(y, prob, kind, relaxed)
            d = y - x
            if fy <= f + g @ d + (d @ d) / (2 * step) or step < 1e-16:
                break
            step *= 0.5
        if np.sqrt(d @ d) / max(step, 1e-300) <= tol or np.sqrt(d @ d) <= 1e-15:
            return y, fy, True, it
        x, f, g = y, fy, gy
        step *= 2.0
    return x, f, False, max_iter


def _starts(prob: SpectrumProblem, n_starts: int, seed: int):
    h, n = prob.h, prob.n
    yield np.full(h, 1.0 - n / h)
    if prob.selection == Selection.SOFT:
        yield minimize_bias_spectrum(prob).x
    rng = stream(seed, 5)
    for _ in range(max(0, n_starts - 2)):
        yield project_feasible(rng.uniform(0, 1, h), n)


def _solve(prob, kind, relaxed, n_starts, seed, max_iter, tol) -> SpectrumSolution:
    if prob.n >= prob.h:
        raise ValueError(f"spectrum optimization needs n < h (n={prob.n}, h={prob.h})")
    best = None
    for x0 in _starts(prob, n_starts, seed):
        x, f, ok, it = _projected_gradient(x0, prob, kind, relaxed, max_iter, tol)
        if best is None or f < best[1]:
            best = (x, f, ok, it)
    x, f, ok, it = best
    h0 = compute_h0(prob.phi, prob.n) if prob.selection == Selection.SOFT else None
    return SpectrumSolution(
        x=x,
        r_hat=from_x_space(x, prob.eta),
        selection=prob.selection,
        value=float(f),
        h0=h0,
        converged=ok,
        info={"iterations": it, "objective": kind, "relaxed": relaxed},
    )


def solve_relaxed(
    prob: SpectrumProblem,
    objective: str = "avg",
    n_starts: int = 10,
    seed: int = 0,
    max_iter: int = 20000,
    tol: float = 1e-10,
) -> SpectrumSolution:
    return _solve(prob, objective, True, n_starts, seed, max_iter, tol)


def solve_direct(
    prob: SpectrumProblem,
    objective: str = "avg",
    n_starts: int = 10,
    seed: int = 0,
    max_iter: int = 20000,
    tol: float = 1e-10,
) -> SpectrumSolution:
    return _solve(prob, objective, False, n_starts, seed, max_iter, tol)
