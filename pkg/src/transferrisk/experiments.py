"""Experiment kinds: each maps a validated config to result tables and a summary.

Tables are returned as ``{filename: (columns, rows)}``; writing them is the
CLI's job. Grid points that hit a regime or numeric failure become rows with
NaN values and a ``status`` naming the failure, so a sweep never aborts.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import full_opt as fo
from .asymptotics import (
    FixedPointError,
    RegimeError,
    averaged_objective,
    regime_of,
    task_risks,
    whiten,
)
from .config import ConfigError, ExperimentConfig, InstanceConfig, PredictorConfig
from .model import (
    CovarianceSpec,
    GroundTruthRepresentation,
    ProblemInstance,
    TaskModel,
    ar1_matrix,
    calibrate_snr,
    make_covariance,
    sample_ground_truth,
    stream,
)
from .montecarlo import RISK_CURVE_COLUMNS, _pool_map, asymptotic_row, risk_curve
from .penalty import Penalty, RegularizationParams, Representation, build_penalty
from .spectrum_opt import (
    HardRegime,
    Selection,
    alignment_coefficients,
    bias_avg_x,
    direct_objective,
    minimize_bias_spectrum,
    minimize_variance_spectrum,
    solve_direct,
    solve_relaxed,
    variance_x,
)
from .upstream import scaling_experiment

NAN = float("nan")
GRID_FAILURES = (RegimeError, FixedPointError, HardRegime, fo.OptimizationFailed, np.linalg.LinAlgError)


@dataclass
class ExperimentOutput:
    tables: dict = field(default_factory=dict)  # filename -> (columns, rows)
    summary: dict = field(default_factory=dict)


def _status(err: Exception) -> str:
    if isinstance(err, RegimeError):
        return err.regime.value
    return type(err).__name__


def build_instance(icfg: InstanceConfig, seed: int, q: int | None = None) -> ProblemInstance:
    q = icfg.q if q is None else q
    c = icfg.covariance
    spec = CovarianceSpec(kind=c.kind, p=icfg.p, rho=c.rho, m=c.m or icfg.p, jitter=c.jitter)
    cov = make_covariance(spec, stream(seed, 1))
    col_cov = ar1_matrix(icfg.feature_rho, icfg.p)
    truth = sample_ground_truth(icfg.p, q, col_cov, stream(seed, 2))
    if icfg.support is not None:
        U = cov.eigvecs[:, : icfg.support]
        truth = GroundTruthRepresentation(U @ (U.T @ truth.B))
    scale = calibrate_snr(truth.B, np.eye(q), icfg.noise_var, icfg.snr)
    return ProblemInstance(cov, truth, TaskModel(np.eye(q), scale, icfg.noise_var))


def sample_beta(inst: ProblemInstance, seed: int) -> np.ndarray:
    """The fixed task used by risk curves."""
    q = inst.q
    alpha = np.sqrt(inst.task.scale / q) * stream(seed, 3).standard_normal(q)
    return inst.truth.B @ alpha


def _explicit_B(pr: PredictorConfig, inst: ProblemInstance) -> np.ndarray:
    if pr.B_path is None:
        return inst.truth.B
    try:
        B = np.load(pr.B_path)
    except OSError as err:
        raise ConfigError(f"predictor {pr.name}: cannot load {pr.B_path}: {err}") from err
    if B.ndim != 2 or B.shape[0] != inst.p:
        raise ConfigError(f"predictor {pr.name}: B must be {inst.p} x k, got {B.shape}")
    return B


def fixed_penalty(pr: PredictorConfig, inst: ProblemInstance) -> Penalty:
    """Penalty of a non-optimized predictor: rp, or fixed lam on oracle/explicit features."""
    if pr.kind == "rp":
        return Penalty.isotropic(inst.p, 1.0)
    if pr.kind == "eep":
        raise ConfigError(f"predictor {pr.name}: eep is only available in ablation/full-opt/heatmap")
    try:
        reg = RegularizationParams(*pr.lam)
    except ValueError as err:
        raise ConfigError(f"predictor {pr.name}: {err}") from err
    B = inst.truth.B if pr.kind == "ofp" else _explicit_B(pr, inst)
    return build_penalty(Representation.from_matrix(B), reg)


def optimizer_config(cfg: ExperimentConfig) -> fo.OptimizerConfig:
    o = cfg.optimizer
    return fo.OptimizerConfig(
        mode=o.mode,
        k=o.k,
        step_size=o.step_size,
        episode_length=o.episode_length,
        max_episodes=o.max_episodes,
        rel_tol=o.rel_tol,
        patience=o.patience,
        max_halvings=o.max_halvings,
        seed=cfg.seed,
    )


def _setup(cfg: ExperimentConfig, inst: ProblemInstance, n: int) -> fo.ObjectiveSetup:
    base = fo.ObjectiveSetup.from_instance(inst, n, cfg.optimizer.mode)
    return replace(base, radius2=cfg.optimizer.radius2 * inst.task.scale)


# --------------------------------------------------------------------------- risk curves


def run_risk_curve(cfg: ExperimentConfig, threads: int = 1, simulate: bool = True) -> ExperimentOutput:
    inst = build_instance(cfg.instance, cfg.seed)
    beta = sample_beta(inst, cfg.seed)
    preds = {pr.name: fixed_penalty(pr, inst) for pr in cfg.predictors}
    if not preds:
        raise ConfigError("risk-curve needs at least one predictor")
    s2 = inst.noise_var
    if simulate:
        rows = risk_curve(inst.cov, preds, beta, s2, cfg.n_grid, cfg.replicates, cfg.seed, threads)
        columns = RISK_CURVE_COLUMNS
    else:
        columns = ["n", "predictor", "R_asy", "B_asy", "VB_asy", "V_asy", "status"]
        rows = []
        for n in cfg.n_grid:
            for name, pen in preds.items():
                row = {"n": int(n), "predictor": name}
                row.update(asymptotic_row(inst.cov, pen, beta, s2, int(n)))
                rows.append({k: row[k] for k in columns})
    summary = {"beta_norm2": float(beta @ beta), "noise_var": s2, "peaks": {}}
    for name in preds:
        mine = [r for r in rows if r["predictor"] == name and np.isfinite(r["R_asy"])]
        if mine:
            top = max(mine, key=lambda r: r["R_asy"])
            summary["peaks"][name] = {"n": top["n"], "R_asy": top["R_asy"]}
    return ExperimentOutput({"results.csv": (columns, rows)}, summary)


# --------------------------------------------------------------------------- ablation (RP / OFP / EEP)

ABLATION_COLUMNS = [
    "n",
    "predictor",
    "risk",
    "bias",
    "variance",
    "lam_alpha",
    "lam_beta",
    "lam",
    "episodes",
    "converged",
    "status",
]


def _predictor_row(pr: PredictorConfig, setup, opt_cfg, inst) -> dict:
    row = {"predictor": pr.name, "episodes": 0, "converged": True}
    if pr.kind == "rp":
        lam = np.ones(3)
        gb = fo.objective(np.zeros((setup.p, 1)), lam, setup, grad=False)
        value, bias, var = gb.value, gb.bias, gb.variance
    elif pr.kind == "explicit":
        lam = np.asarray(pr.lam, float)
        gb = fo.objective(_explicit_B(pr, inst), lam, setup, grad=False)
        value, bias, var = gb.value, gb.bias, gb.variance
    else:
        if pr.kind == "ofp":
            res = fo.optimize_ofp(setup, opt_cfg)
        else:
            res = fo.optimize_eep(setup, opt_cfg, starts=tuple(pr.starts))
        lam, value, bias, var = res.lam, res.value, res.bias, res.variance
        row.update(episodes=res.episodes, converged=res.converged)
    row.update(
        risk=value,
        bias=bias,
        variance=var,
        lam_alpha=float(lam[0]),
        lam_beta=float(lam[1]),
        lam=float(lam[2]),
        status="ok",
    )
    return row


def run_ablation(cfg: ExperimentConfig, threads: int = 1) -> ExperimentOutput:
    inst = build_instance(cfg.instance, cfg.seed)
    if not cfg.predictors:
        raise ConfigError("ablation needs at least one predictor")
    opt_cfg = optimizer_config(cfg)
    jobs = [(int(n), pr) for n in cfg.n_grid for pr in cfg.predictors]

    def one(job):
        n, pr = job
        try:
            row = _predictor_row(pr, _setup(cfg, inst, n), opt_cfg, inst)
        except GRID_FAILURES as err:
            row = {k: NAN for k in ABLATION_COLUMNS}
            row.update(predictor=pr.name, episodes=0, converged=False, status=_status(err))
        row["n"] = n
        return {k: row[k] for k in ABLATION_COLUMNS}

    rows = list(_pool_map(one, jobs, threads))
    summary = {"dominance": []}
    names = [pr.name for pr in cfg.predictors]
    kinds = {pr.name: pr.kind for pr in cfg.predictors}
    for n in cfg.n_grid:
        here = {r["predictor"]: r["risk"] for r in rows if r["n"] == n}
        eep = [here[m] for m in names if kinds[m] == "eep"]
        others = [here[m] for m in names if kinds[m] in ("rp", "ofp")]
        if eep and others:
            summary["dominance"].append(
                {"n": int(n), "eep": min(eep), "best_other": min(others), "eep_best": min(eep) <= min(others) + 1e-6}
            )
    return ExperimentOutput({"results.csv": (ABLATION_COLUMNS, rows)}, summary)


# --------------------------------------------------------------------------- spectrum optimization

SPECTRUM_COLUMNS = ["n", "h", "h1", "h0", "selection", "solver", "risk", "bias", "variance", "status"]


def run_spectrum(cfg: ExperimentConfig, threads: int = 1) -> ExperimentOutput:
    inst = build_instance(cfg.instance, cfg.seed)
    sc = cfg.spectrum
    radius2 = cfg.optimizer.radius2 * inst.task.scale
    rows = []
    for n in cfg.n_grid:
        prob = alignment_coefficients(
            inst.cov, inst.truth.B, inst.task.prior_cov, int(n), inst.noise_var, radius2
        )
        base = {"n": int(n), "h": prob.h, "h1": prob.h1, "selection": prob.selection.value}
        solvers = {
            "bias_closed_form": lambda: minimize_bias_spectrum(prob),
            "variance_closed_form": lambda: minimize_variance_spectrum(prob.eta, prob.n),
            "relaxed": lambda: solve_relaxed(prob, sc.objective, sc.n_starts, cfg.seed, sc.max_iter),
            "direct": lambda: solve_direct(prob, sc.objective, sc.n_starts, cfg.seed, sc.max_iter),
        }
        for name, solve in solvers.items():
            row = dict(base, solver=name, h0=NAN)
            try:
                if prob.n >= prob.h:
                    raise RegimeError(regime_of(prob.n, prob.h), prob.n, prob.h)
                sol = solve()
                row.update(
                    h0=NAN if sol.h0 is None else sol.h0,
                    risk=direct_objective(sol.x, prob, sc.objective),
                    bias=bias_avg_x(sol.x, prob),
                    variance=variance_x(sol.x, prob.n),
                    # hard selection has no h0
                    status="ok" if prob.selection == Selection.SOFT else "ok_hard_selection",
                )
                if not np.isfinite(row["risk"]):
                    row["status"] = "variance_diverges"
            except (*GRID_FAILURES, ValueError) as err:
                row.update(risk=NAN, bias=NAN, variance=NAN, status=_status(err))
            rows.append({k: row[k] for k in SPECTRUM_COLUMNS})
    per_n = rows[:: len(solvers)]
    flips = [int(b["n"]) for a, b in zip(per_n, per_n[1:]) if a["selection"] != b["selection"]]
    summary = {"selection_flips_at_n": flips}
    return ExperimentOutput({"results.csv": (SPECTRUM_COLUMNS, rows)}, summary)


# --------------------------------------------------------------------------- single optimization runs

TRACE_COLUMNS = ["step", "episode", "L", "grad_norm", "status"]


def _single_n(cfg: ExperimentConfig) -> int:
    return int(cfg.n_grid[0])


def _result_summary(res: fo.OptimizationResult) -> dict:
    return {
        "value": res.value,
        "bias": res.bias,
        "variance": res.variance,
        "lam": [float(v) for v in res.lam],
        "episodes": res.episodes,
        "converged": bool(res.converged),
        "halvings": res.halvings,
    }


def _optimize_for(cfg: ExperimentConfig, inst: ProblemInstance) -> fo.OptimizationResult:
    setup = _setup(cfg, inst, _single_n(cfg))
    opt_cfg = optimizer_config(cfg)
    kinds = [pr for pr in cfg.predictors if pr.kind in ("ofp", "eep")]
    pr = kinds[0] if kinds else PredictorConfig(name="eep", kind="eep", starts=["random"])
    if pr.kind == "ofp":
        return fo.optimize_ofp(setup, opt_cfg)
    return fo.optimize_eep(setup, opt_cfg, starts=tuple(pr.starts))


def run_full_opt(cfg: ExperimentConfig, threads: int = 1) -> ExperimentOutput:
    inst = build_instance(cfg.instance, cfg.seed)
    res = _optimize_for(cfg, inst)
    rows = []
    for t in res.trace:
        gn = t["grad_norm"]
        rows.append(dict(t, status="initial" if not np.isfinite(gn) else "ok"))
    summary = _result_summary(res)
    summary["n"] = _single_n(cfg)
    return ExperimentOutput({"results.csv": (TRACE_COLUMNS, rows)}, summary)


def _matrix_table(A: np.ndarray):
    cols = ["row"] + [f"c{j}" for j in range(A.shape[1])] + ["status"]
    rows = []
    for i, line in enumerate(A):
        row = {"row": i, "status": "ok"}
        row.update({f"c{j}": float(v) for j, v in enumerate(line)})
        rows.append(row)
    return cols, rows


def block_mass(M: np.ndarray, q: int) -> tuple[float, float]:
    """Mean |M| on the top-left q x q block and on the top-q rows outside it."""
    top = M[:q, :q].mean()
    off = M[:q, q:].mean() if M.shape[1] > q else 0.0
    return float(top), float(off)


def run_heatmap(cfg: ExperimentConfig, threads: int = 1) -> ExperimentOutput:
    inst = build_instance(cfg.instance, cfg.seed)
    res = _optimize_for(cfg, inst)
    M, Nm, spec = fo.heatmap_alignment(res.B, inst.truth.B, inst.cov.sigma)
    top, off = block_mass(M, inst.q)
    spec_cols = ["index", "d_hat2", "d_star2", "eta", "status"]
    spec_rows = [
        {"index": i, "d_hat2": float(a), "d_star2": float(b), "eta": float(c), "status": "ok"}
        for i, (a, b, c) in enumerate(zip(spec["d_hat2"], spec["d_star2"], spec["eta"]))
    ]
    res_cols = ["n", "risk", "bias", "variance", "top_block_mass", "off_block_mass", "status"]
    res_rows = [
        {
            "n": _single_n(cfg),
            "risk": res.value,
            "bias": res.bias,
            "variance": res.variance,
            "top_block_mass": top,
            "off_block_mass": off,
            "status": "ok" if res.converged else "not_converged",
        }
    ]
    summary = _result_summary(res)
    summary.update(top_block_mass=top, off_block_mass=off)
    tables = {
        "results.csv": (res_cols, res_rows),
        "M.csv": _matrix_table(M),
        "N.csv": _matrix_table(Nm),
        "spectrum.csv": (spec_cols, spec_rows),
    }
    return ExperimentOutput(tables, summary)


# --------------------------------------------------------------------------- upstream scaling


def run_upstream(cfg: ExperimentConfig, threads: int = 1) -> ExperimentOutput:
    inst = build_instance(cfg.instance, cfg.seed)
    up = cfg.upstream
    seeds = [cfg.seed * 1000 + s for s in range(up.seeds)]
    res = scaling_experiment(
        inst,
        Penalty.isotropic(inst.p, 1.0),
        up.n,
        up.n_pre_grid,
        up.noise_var,
        seeds,
        up.shared_design,
        up.noise_draws,
    )
    cols = ["n_pre", "error", "se", "rms", "slope", "status"]
    rows = [dict(r, slope=res.slope) for r in res.rows]
    summary = {"slope": res.slope, "intercept": res.intercept, "reference_slope": -0.5}
    return ExperimentOutput({"results.csv": (cols, [{k: r[k] for k in cols} for r in rows])}, summary)


# --------------------------------------------------------------------------- concentration over tasks

CONCENTRATION_COLUMNS = ["q", "instance", "max_dev", "mean_dev", "avg_risk", "status"]


def concentration_rows(cfg: ExperimentConfig, threads: int = 1) -> list[dict]:
    """Per (q, instance): deviation of the per-task risk from its task average.

    Sigma and the (isotropic) penalty do not depend on q, so the whitened
    spectrum is computed once.
    """
    cc = cfg.concentration
    base = build_instance(cfg.instance, cfg.seed, q=1)
    pen = Penalty.isotropic(base.p, 1.0)
    spec = whiten(base.cov, pen)
    jobs = [(int(q), i) for q in cc.q_grid for i in range(cc.instances)]

    def one(job):
        q, i = job
        iseed = cfg.seed * 1000 + i
        inst = build_instance(cfg.instance, iseed, q=q)
        row = {"q": q, "instance": i}
        try:
            avg = averaged_objective(spec, inst.truth.B, inst.task.prior_cov, inst.noise_var, cc.n).risk
            xi = stream(iseed, 4, q).standard_normal((q, cc.draws))
            betas = inst.truth.B @ (np.sqrt(inst.task.scale / q) * xi)
            dev = np.abs(task_risks(spec, betas, inst.noise_var, cc.n) - avg)
            row.update(max_dev=float(dev.max()), mean_dev=float(dev.mean()), avg_risk=avg, status="ok")
        except GRID_FAILURES as err:
            row.update(max_dev=NAN, mean_dev=NAN, avg_risk=NAN, status=_status(err))
        return row

    return list(_pool_map(one, jobs, threads))


def run_concentration(cfg: ExperimentConfig, threads: int = 1) -> ExperimentOutput:
    rows = concentration_rows(cfg, threads)
    by_q = {}
    for r in rows:
        by_q.setdefault(r["q"], []).append(r["max_dev"])
    mean_max = {str(q): float(np.mean(v)) for q, v in by_q.items()}
    qs = sorted(by_q)
    summary = {
        "mean_max_dev": mean_max,
        "shrink_factor": mean_max[str(qs[0])] / mean_max[str(qs[-1])] if len(qs) > 1 else NAN,
        "reference_factor": float(
            np.sqrt(np.log(qs[0]) / qs[0]) / np.sqrt(np.log(qs[-1]) / qs[-1])
        )
        if len(qs) > 1 and qs[0] > 1
        else NAN,
    }
    return ExperimentOutput({"results.csv": (CONCENTRATION_COLUMNS, rows)}, summary)


RUNNERS = {
    "risk-curve": run_risk_curve,
    "ablation": run_ablation,
    "spectrum": run_spectrum,
    "full-opt": run_full_opt,
    "heatmap": run_heatmap,
    "upstream": run_upstream,
    "concentration": run_concentration,
}


def run(cfg: ExperimentConfig, threads: int = 1, simulate: bool = True) -> ExperimentOutput:
    if cfg.kind == "risk-curve":
        return run_risk_curve(cfg, threads, simulate=simulate)
    return RUNNERS[cfg.kind](cfg, threads)
