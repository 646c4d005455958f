"""Gradient-based design of the representation and regularization.

The objective maps ``(B_hat, lam)`` to the averaged or worst-case asymptotic
risk. Its gradient is written out by hand:

* ``Gamma^{-1/2}`` and ``Gamma^{1/2}`` are spectral functions of ``B_hat B_hat^T``
  and ``S = Gamma^{-1/2} Sigma Gamma^{-1/2}`` enters through spectral functions
  too, so both eigendecompositions are differentiated with divided differences
  (finite at repeated eigenvalues, e.g. the zero block of a thin ``B_hat``);
* b0 is differentiated implicitly through its fixed-point equation;
* the worst-case top eigenvalue contributes ``v v^T``.

``optimize`` runs Adam in episodes of 50 steps and stops once the objective
fails to improve by more than 0.1% for 7 consecutive episodes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .asymptotics import (
    SPECTRUM_RTOL,
    RegimeError,
    averaged_objective,
    regime_of,
    solve_b0,
    whiten,
    worst_case_objective,
)
from .model import CovarianceModel, ProblemInstance, stream, sym_eigh
from .penalty import (
    RegularizationParams,
    Representation,
    build_penalty,
    shrink_profile,
    shrink_profile_partials,
)

TIE_RTOL = 1e-8
MODES = ("avg", "worst")


@dataclass(frozen=True, eq=False)
class ObjectiveSetup:
    sigma: np.ndarray
    B_star: np.ndarray
    prior_cov: np.ndarray  # covariance of sqrt(q) * alpha (avg mode)
    noise_var: float
    n: int
    mode: str = "avg"
    radius2: float = 1.0  # squared radius of the task ball (worst mode)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def q(self) -> int:
        return self.B_star.shape[1]

    @property
    def p(self) -> int:
        return self.sigma.shape[0]

    @classmethod
    def from_instance(cls, inst: ProblemInstance, n: int, mode: str = "avg") -> "ObjectiveSetup":
        return cls(
            sigma=inst.cov.sigma,
            B_star=inst.truth.B,
            prior_cov=inst.task.prior_cov,
            noise_var=inst.noise_var,
            n=n,
            mode=mode,
            radius2=inst.task.scale,
        )


@dataclass(frozen=True, eq=False)
class GradientBundle:
    value: float
    grad_B: Optional[np.ndarray]
    grad_lam: Optional[np.ndarray]  # w.r.t. (lam_alpha, lam_beta, lam)
    bias: float
    variance: float
    b0: float
    diagnostics: dict = field(default_factory=dict)


def _divided_differences(s: np.ndarray, f: np.ndarray, df: np.ndarray) -> np.ndarray:
    """Matrix of (f_i - f_j)/(s_i - s_j), with f' on (near-)ties."""
    ds = s[:, None] - s[None, :]
    scale = max(np.abs(s).max(), 1e-300)
    tie = np.abs(ds) <= TIE_RTOL * scale
    with np.errstate(divide="ignore", invalid="ignore"):
        L = (f[:, None] - f[None, :]) / ds
    mid = 0.5 * (df[:, None] + df[None, :])
    return np.where(tie, mid, L)


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def _bias_weight(t, b):
    return t / (1 + t * b) ** 2


def objective(
    B: np.ndarray, lam: np.ndarray, setup: ObjectiveSetup, grad: bool = True
) -> GradientBundle:
    """Objective value and (optionally) its gradient w.r.t. B_hat and lam."""
    lam_alpha, lam_beta, lam_ = (float(v) for v in lam)
    sigma, Bs, n = setup.sigma, setup.B_star, setup.n

    # forward: penalty as spectral function of B B^T
    s, Q = np.linalg.eigh(B @ B.T)
    s = np.clip(s, 0.0, None)
    reg = RegularizationParams(lam_alpha, lam_beta, lam_)
    r = shrink_profile(s, reg)
    fa, fc = r**-0.5, r**0.5
    A = (Q * fa) @ Q.T
    C = (Q * fc) @ Q.T

    t, W = np.linalg.eigh(_sym(A @ sigma @ A))
    H = t > SPECTRUM_RTOL * t.max()
    t = np.where(H, t, 0.0)
    h = int(H.sum())
    if n >= h:
        raise RegimeError(regime_of(n, h), n, h)
    b = solve_b0(t[H], n)
    u = t * b
    xs = 1.0 / (1.0 + u)
    Nv = np.sum(u**2 * xs**2)
    Dv = np.sum(u * xs**2)
    V = Nv / Dv
    g = _bias_weight(t, b)

    E = C @ Bs  # p x q
    Ew = W.T @ E
    if setup.mode == "avg":
        Kq = setup.prior_cov / setup.q
        top = None
    else:
        M = _sym((Ew * g[:, None]).T @ Ew)
        mw, mv = np.linalg.eigh(M)
        vtop = mv[:, -1]
        Kq = setup.radius2 * np.outer(vtop, vtop)
        top = (mw[-1], mw[-2] if mw.size > 1 else -np.inf)
    Pw = Ew @ Kq @ Ew.T  # W^T P W with P = E Kq E^T
    bias = float(np.sum(g * np.diag(Pw)))
    s2 = setup.noise_var
    if setup.mode == "avg":
        L = bias * (1 + V) + s2 * V
        dL_dV = bias + s2
    else:
        L = s2 * V + (V + 1) * bias
        dL_dV = s2 + bias
    dL_dbias = 1 + V
    if not grad:
        return GradientBundle(L, None, None, bias, V, b)

    # backward: scalars of the whitened spectrum
    dg_dt = (1 - u) * xs**3
    dg_db = -2 * t**2 * xs**3
    dN_du = 2 * u * xs**3
    dD_du = (1 - u) * xs**3
    dV_dt = (b * dN_du * Dv - Nv * b * dD_du) / Dv**2
    dV_db = (np.sum(t * dN_du) * Dv - Nv * np.sum(t * dD_du)) / Dv**2
    dL_db = dL_dbias * np.sum(np.diag(Pw) * dg_db) + dL_dV * dV_db
    db_dt = np.where(H, -(b * xs**2) / np.sum(t * xs**2), 0.0)
    dL_dt_scalar = np.where(H, dL_dV * dV_dt + dL_db * db_dt, 0.0)

    Gw = dL_dbias * _divided_differences(t, g, dg_dt) * Pw
    Gw[np.diag_indices_from(Gw)] += dL_dt_scalar
    G_S = W @ _sym(Gw) @ W.T

    # bias pairing through C: P = (C Bs) Kq (C Bs)^T
    J = (W * g) @ W.T
    dL_dE = 2 * dL_dbias * J @ E @ Kq
    dL_dC = dL_dE @ Bs.T
    dL_dA = G_S @ A @ sigma + sigma @ A @ G_S

    Abar = _sym(Q.T @ dL_dA @ Q)
    Cbar = _sym(Q.T @ dL_dC @ Q)
    dr_ds, dr_dla, dr_dlb, dr_dl = shrink_profile_partials(s, lam_alpha, lam_beta, lam_)
    dfa_dr, dfc_dr = -0.5 * r**-1.5, 0.5 * r**-0.5
    Kmat = _divided_differences(s, fa, dfa_dr * dr_ds) * Abar + _divided_differences(
        s, fc, dfc_dr * dr_ds
    ) * Cbar
    dL_dG = Q @ Kmat @ Q.T
    grad_B = 2 * _sym(dL_dG) @ B
    da, dc = np.diag(Abar), np.diag(Cbar)
    grad_lam = np.array(
        [np.sum((da * dfa_dr + dc * dfc_dr) * d) for d in (dr_dla, dr_dlb, dr_dl)]
    )
    diag = {
        "dL_db0": float(dL_db),
        "dL_dt": np.diag(_sym(Gw))[H],
        "db0_dt": db_dt[H],
        "t": t[H],
    }
    if top is not None:
        diag["top_gap"] = float(top[0] - top[1])
    return GradientBundle(L, grad_B, grad_lam, bias, float(V), float(b), diag)


def objective_value(B, lam, setup: ObjectiveSetup) -> float:
    return objective(B, lam, setup, grad=False).value


def objective_via_asymptotics(B, lam, setup: ObjectiveSetup) -> float:
    """Same objective assembled from the penalty and asymptotics modules."""
    pen = build_penalty(Representation.from_matrix(B), RegularizationParams(*lam))
    cov = CovarianceModel.from_matrix(setup.sigma)
    spec = whiten(cov, pen)
    if setup.mode == "avg":
        return averaged_objective(spec, setup.B_star, setup.prior_cov, setup.noise_var, setup.n).risk
    return worst_case_objective(spec, setup.B_star, setup.noise_var, setup.n, setup.radius2).risk


def fd_gradient(B, lam, setup: ObjectiveSetup, step: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Central finite differences (relative step) of the objective."""
    def f(Bx, lx):
        return objective_value(Bx, lx, setup)

    gB = np.zeros_like(B)
    for idx in np.ndindex(*B.shape):
        hstep = step * max(1.0, abs(B[idx]))
        Bp, Bm = B.copy(), B.copy()
        Bp[idx] += hstep
        Bm[idx] -= hstep
        gB[idx] = (f(Bp, lam) - f(Bm, lam)) / (2 * hstep)
    lam = np.asarray(lam, float)
    gl = np.zeros(3)
    for i in range(3):
        hstep = step * max(1.0, abs(lam[i]))
        lp, lm = lam.copy(), lam.copy()
        lp[i] += hstep
        lm[i] -= hstep
        gl[i] = (f(B, lp) - f(B, lm)) / (2 * hstep)
    return gB, gl


def db0_dt_closed_form(t: np.ndarray, b0: float) -> np.ndarray:
    return -(b0 / (1 + t * b0) ** 2) / np.sum(t / (1 + t * b0) ** 2)


# --------------------------------------------------------------------------- optimizer


@dataclass(frozen=True)
class OptimizerConfig:
    mode: str = "avg"
    learn_features: bool = True  # False: B_hat frozen, only lam is tuned
    k: Optional[int] = None  # representation width (default p)
    step_size: float = 1e-3
    episode_length: int = 50
    max_episodes: int = 200
    rel_tol: float = 1e-3
    patience: int = 7
    max_halvings: int = 3
    seed: int = 0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8


@dataclass
class OptimizationResult:
    B: np.ndarray
    lam: np.ndarray
    value: float
    bias: float
    variance: float
    trace: list  # dicts: step, episode, L, grad_norm
    episodes: int
    converged: bool
    halvings: int = 0


class OptimizationFailed(RuntimeError):
    pass


def initial_point(p: int, k: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Uniform initialization: B entries on +-k^{-1/2}, log-lam entries on +-sqrt(3)."""
    rng = stream(seed, 7)
    B = rng.uniform(-(k**-0.5), k**-0.5, size=(p, k))
    theta = rng.uniform(-math.sqrt(3), math.sqrt(3), size=3)
    return B, theta


class _Adam:
    def __init__(self, shapes, lr, betas, eps):
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.k = 0

    def step(self, params, grads):
        self.k += 1
        out = []
        for i, (x, g) in enumerate(zip(params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mh = self.m[i] / (1 - self.b1**self.k)
            vh = self.v[i] / (1 - self.b2**self.k)
            out.append(x - self.lr * mh / (np.sqrt(vh) + self.eps))
        return out

    def state(self):
        return ([m.copy() for m in self.m], [v.copy() for v in self.v], self.k)

    def restore(self, st):
        self.m, self.v, self.k = [m.copy() for m in st[0]], [v.copy() for v in st[1]], st[2]


def optimize(
    setup: ObjectiveSetup,
    config: OptimizerConfig,
    B0: Optional[np.ndarray] = None,
    lam0: Optional[np.ndarray] = None,
) -> OptimizationResult:
    """Adam on (B_hat, log lam) with the episode/patience stopping rule.

    A NaN or a regime failure inside an episode rewinds to the start of that
    episode and halves the step size, at most ``max_halvings`` times.
    """
    setup = replace(setup, mode=config.mode)
    p = setup.p
    k = config.k or p
    Binit, theta_init = initial_point(p, k, config.seed)
    B = Binit if B0 is None else np.array(B0, float)
    theta = theta_init if lam0 is None else np.log(np.asarray(lam0, float))

    lr = config.step_size
    adam = _Adam([B.shape, (3,)], lr, config.adam_betas, config.adam_eps)
    first = objective(B, np.exp(theta), setup, grad=False)
    best = (first.value, B.copy(), theta.copy(), first.bias, first.variance)
    trace = [{"step": 0, "episode": 0, "L": first.value, "grad_norm": float("nan")}]
    stall, halvings, step_count, ep = 0, 0, 0, 0
    reference = first.value
    while ep < config.max_episodes and stall < config.patience:
        snap = (B.copy(), theta.copy(), adam.state(), step_count, len(trace))
        ok = True
        ep_best = np.inf
        for _ in range(config.episode_length):
            try:
                gb = objective(B, np.exp(theta), setup)
            except (RegimeError, ArithmeticError, np.linalg.LinAlgError, ValueError):
                ok = False
                break
            if not np.isfinite(gb.value) or not np.all(np.isfinite(gb.grad_B)):
                ok = False
                break
            gB = gb.grad_B if config.learn_features else np.zeros_like(B)
            gtheta = gb.grad_lam * np.exp(theta)
            if gb.value < best[0]:
                best = (gb.value, B.copy(), theta.copy(), gb.bias, gb.variance)
            ep_best = min(ep_best, gb.value)
            gnorm = float(np.sqrt(np.sum(gB**2) + np.sum(gtheta**2)))
            trace.append({"step": step_count, "episode": ep, "L": gb.value, "grad_norm": gnorm})
            B, theta = adam.step([B, theta], [gB, gtheta])
            step_count += 1
        if not ok:
            if halvings >= config.max_halvings:
                raise OptimizationFailed(f"objective diverged after {halvings} step halvings")
            halvings += 1
            B, theta, st, step_count, ntr = snap
            adam.restore(st)
            del trace[ntr:]
            adam.lr *= 0.5
            continue
        # last iterate of the episode counts too
        try:
            end = objective(B, np.exp(theta), setup, grad=False)
            if np.isfinite(end.value) and end.value < best[0]:
                best = (end.value, B.copy(), theta.copy(), end.bias, end.variance)
        except (RegimeError, ArithmeticError, np.linalg.LinAlgError, ValueError):
            pass
        ep += 1
        if best[0] < reference - config.rel_tol * abs(reference):
            stall = 0
        else:
            stall += 1
        reference = min(reference, best[0])
    value, Bb, tb, bias, var = best
    return OptimizationResult(
        B=Bb,
        lam=np.exp(tb),
        value=value,
        bias=bias,
        variance=var,
        trace=trace,
        episodes=ep,
        converged=stall >= config.patience,
        halvings=halvings,
    )


def ridgeless_value(setup: ObjectiveSetup) -> float:
    """Objective of the plain min-norm predictor (isotropic penalty)."""
    p = setup.p
    return objective_value(np.zeros((p, 1)), np.array([1.0, 1.0, 1.0]), setup)


def optimize_ofp(setup: ObjectiveSetup, config: OptimizerConfig, lam0=None) -> OptimizationResult:
    """Oracle featurization: B_hat = B_star frozen, lam tuned."""
    cfg = replace(config, learn_features=False)
    return optimize(setup, cfg, B0=setup.B_star.copy(), lam0=lam0)


def optimize_eep(
    setup: ObjectiveSetup,
    config: OptimizerConfig,
    starts: tuple = ("random",),
    ofp: Optional[OptimizationResult] = None,
) -> OptimizationResult:
    """End-to-end: B_hat and lam both learned; best over the requested starts.

    ``"random"`` is the uniform initialization; ``"ofp"`` warm-starts from the
    oracle-featurization optimum (B_star zero-padded to width k).
    """
    p = setup.p
    k = config.k or p
    results = []
    for start in starts:
        if start == "random":
            results.append(optimize(setup, config))
        elif start == "ofp":
            if ofp is None:
                ofp = optimize_ofp(setup, config)
            B0 = np.zeros((p, k))
            w = min(k, setup.q)
            if k >= setup.q:
                B0[:, :w] = ofp.B
            else:
                # best rank-k approximation of B_star B_star^T
                U, sv, _ = np.linalg.svd(ofp.B, full_matrices=False)
                B0 = U[:, :k] * sv[:k]
            results.append(optimize(setup, config, B0=B0, lam0=ofp.lam))
        else:
            raise ValueError(f"unknown start {start!r}")
    return min(results, key=lambda r: r.value)


# --------------------------------------------------------------------------- alignment heatmaps


def heatmap_alignment(B_hat: np.ndarray, B_star: np.ndarray, sigma: np.ndarray):
    """|<q_hat_i, q*_j>| and |<q_hat_i, u_j>| with all eigenvectors sorted descending."""
    _, Qh = sym_eigh(B_hat @ B_hat.T)
    d_star, Qs = sym_eigh(B_star @ B_star.T)
    eta, U = sym_eigh(sigma)
    d_hat = np.linalg.eigvalsh(B_hat @ B_hat.T)[::-1]
    M = np.abs(Qh.T @ Qs)
    Nm = np.abs(Qh.T @ U)
    spectrum = {"d_hat2": np.clip(d_hat, 0, None), "d_star2": np.clip(d_star, 0, None), "eta": eta}
    return M, Nm, spectrum
