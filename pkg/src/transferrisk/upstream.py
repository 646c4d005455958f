"""Upstream stage: per-task OLS estimates of the ground-truth representation.

Each of the q upstream tasks regresses ``y_i = X_i b_i + eps_i`` with more
samples than features. The downstream effect of the estimation error is
measured by plugging the estimate into the averaged asymptotic risk in place
of the true representation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .asymptotics import averaged_objective, whiten
from .model import ProblemInstance, stream
from .penalty import Penalty

UPSTREAM_KEY = 11


@dataclass(frozen=True)
class UpstreamConfig:
    n_pre: int
    noise_var: float = 0.01
    shared_design: bool = True  # one design for all tasks; False draws one per task

    def __post_init__(self):
        if self.n_pre <= 0:
            raise ValueError("n_pre must be positive")
        if self.noise_var < 0:
            raise ValueError("noise_var must be non-negative")


@dataclass(frozen=True, eq=False)
class UpstreamData:
    designs: list  # q designs, or a single shared one repeated
    targets: np.ndarray  # n_pre x q


@dataclass(frozen=True, eq=False)
class RepresentationEstimate:
    B: np.ndarray  # p x q
    residual_norms: np.ndarray  # per task ||X b_i - y_i||
    config: UpstreamConfig


def generate_upstream(
    inst: ProblemInstance, config: UpstreamConfig, rng: np.random.Generator
) -> UpstreamData:
    p, q = inst.truth.p, inst.truth.q
    if config.n_pre <= p:
        raise ValueError(f"OLS needs n_pre > p (got n_pre={config.n_pre}, p={p})")
    root = inst.cov.sqrt
    n_designs = 1 if config.shared_design else q
    base = [rng.standard_normal((config.n_pre, p)) @ root for _ in range(n_designs)]
    designs = base * q if config.shared_design else base
    noise = np.sqrt(config.noise_var) * rng.standard_normal((config.n_pre, q))
    Y = np.column_stack([designs[i] @ inst.truth.B[:, i] for i in range(q)]) + noise
    return UpstreamData(designs=designs, targets=Y)


def _ols(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    G = X.T @ X
    w = np.linalg.eigvalsh(G)
    if w[0] <= 1e-12 * w[-1]:
        raise np.linalg.LinAlgError("singular X^T X in upstream OLS")
    return np.linalg.solve(G, X.T @ Y)


def estimate_representation(data: UpstreamData, config: UpstreamConfig) -> RepresentationEstimate:
    Y = data.targets
    if config.shared_design:
        X = data.designs[0]
        B = _ols(X, Y)
        res = np.linalg.norm(X @ B - Y, axis=0)
    else:
        cols = [_ols(X, Y[:, i]) for i, X in enumerate(data.designs)]
        B = np.column_stack(cols)
        res = np.array([np.linalg.norm(X @ b - Y[:, i]) for i, (X, b) in enumerate(zip(data.designs, cols))])
    return RepresentationEstimate(B=B, residual_norms=res, config=config)


def plugin_gap(inst: ProblemInstance, pen: Penalty, B_est: np.ndarray, n: int) -> float:
    """Signed ``R_avg(estimate) - R_avg(truth)`` for a fixed downstream penalty."""
    spec = whiten(inst.cov, pen)
    prior, s2 = inst.task.prior_cov, inst.task.noise_var
    est = averaged_objective(spec, B_est, prior, s2, n).risk
    true = averaged_objective(spec, inst.truth.B, prior, s2, n).risk
    return est - true


@dataclass(frozen=True)
class ScalingResult:
    rows: list  # dicts: n_pre, error, se, rms, status
    slope: float
    intercept: float
    gaps: np.ndarray  # seeds x noise draws x grid, signed


def loglog_slope(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    slope, intercept = np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)
    return float(slope), float(intercept)


def scaling_experiment(
    inst: ProblemInstance,
    pen: Penalty,
    n: int,
    n_pre_grid: Sequence[int],
    noise_var: float,
    seeds: Sequence[int],
    shared_design: bool = True,
    noise_draws: int = 1,
) -> ScalingResult:
    """Plug-in risk error against n_pre, averaged over seeds, with its log-log slope.

    Each seed draws one upstream design (and ``noise_draws`` label-noise
    draws) at the largest n_pre; smaller grid points use the leading rows, so
    the grid shares randomness. A seed's error is the mean of |gap| over its
    noise draws.
    """
    grid = sorted(int(v) for v in n_pre_grid)
    if grid[-1] < 10 * grid[0]:
        raise ValueError("n_pre grid must span at least one decade")
    if noise_draws < 1:
        raise ValueError("noise_draws must be at least 1")
    spec = whiten(inst.cov, pen)
    prior, s2 = inst.task.prior_cov, inst.task.noise_var

    def risk_of(B):
        return averaged_objective(spec, B, prior, s2, n).risk

    base = risk_of(inst.truth.B)
    gaps = np.empty((len(seeds), noise_draws, len(grid)))
    for a, seed in enumerate(seeds):
        rng = stream(seed, UPSTREAM_KEY)
        full = generate_upstream(inst, UpstreamConfig(grid[-1], noise_var, shared_design), rng)
        signal = _noise_free(inst, full)
        for d in range(noise_draws):
            # draw 0 keeps the noise drawn with the design
            if d == 0:
                targets = full.targets
            else:
                targets = signal + np.sqrt(noise_var) * rng.standard_normal(signal.shape)
            for b, m in enumerate(grid):
                cfg = UpstreamConfig(m, noise_var, shared_design)
                sub = UpstreamData([X[:m] for X in full.designs], targets[:m])
                gaps[a, d, b] = risk_of(estimate_representation(sub, cfg).B) - base
    err = np.abs(gaps).mean(axis=1)  # seeds x grid
    mean = err.mean(axis=0)
    se = err.std(axis=0, ddof=1) / np.sqrt(len(seeds)) if len(seeds) > 1 else np.zeros(len(grid))
    rms = np.sqrt((gaps**2).mean(axis=(0, 1)))
    # round-off level errors count as exact recovery
    positive = mean > 1e-12 * max(abs(base), 1.0)
    slope, intercept = (
        loglog_slope(np.array(grid)[positive], mean[positive]) if positive.sum() >= 2 else (np.nan, np.nan)
    )
    rows = [
        {
            "n_pre": m,
            "error": float(mean[b]),
            "se": float(se[b]),
            "rms": float(rms[b]),
            "status": "ok" if positive[b] else "zero_error",
        }
        for b, m in enumerate(grid)
    ]
    return ScalingResult(rows=rows, slope=slope, intercept=intercept, gaps=gaps)


def _noise_free(inst: ProblemInstance, data: UpstreamData) -> np.ndarray:
    B = inst.truth.B
    return np.column_stack([X @ B[:, i] for i, X in enumerate(data.designs)])
