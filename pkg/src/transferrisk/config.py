"""Experiment configuration: nested dataclasses loaded from YAML or JSON.

Unknown keys are rejected at every level and all values are validated before
any computation starts. The schema is documented in docs/config.md.
"""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

KINDS = ("risk-curve", "ablation", "spectrum", "full-opt", "heatmap", "upstream", "concentration")
PREDICTOR_KINDS = ("rp", "ofp", "eep", "explicit")


class ConfigError(ValueError):
    pass


@dataclass
class CovarianceConfig:
    kind: str = "identity"  # identity | ar1 | wishart_jitter
    rho: float = 0.5
    m: Optional[int] = None  # Wishart rank (default p)
    jitter: float = 0.005


@dataclass
class InstanceConfig:
    p: int = 100
    q: int = 30
    covariance: CovarianceConfig = field(default_factory=CovarianceConfig)
    feature_rho: float = 0.5  # AR(1) correlation across rows of each B_star column; 0 = iid
    snr: float = 10.0
    noise_var: float = 1.0
    support: Optional[int] = None  # confine B_star to this many leading Sigma eigenvectors


@dataclass
class PredictorConfig:
    name: str
    kind: str  # rp | ofp | eep | explicit
    lam: list = field(default_factory=lambda: [1.0, 1.0, 1.0])  # lam_alpha, lam_beta, lam
    starts: list = field(default_factory=lambda: ["random", "ofp"])  # eep only
    B_path: Optional[str] = None  # explicit only: .npy p x k matrix; default B_star


@dataclass
class OptimizerSettings:
    mode: str = "avg"
    k: Optional[int] = None
    step_size: float = 1e-2
    episode_length: int = 50
    max_episodes: int = 200
    rel_tol: float = 1e-3
    patience: int = 7
    max_halvings: int = 3
    radius2: float = 1.0  # worst-case ball, in units of the calibrated prior scale


@dataclass
class SpectrumSettings:
    objective: str = "avg"
    n_starts: int = 10
    max_iter: int = 20000


@dataclass
class UpstreamSettings:
    n: int = 30
    n_pre_grid: list = field(default_factory=lambda: [500, 1000, 2000, 3000, 5000])
    noise_var: float = 1e-4
    seeds: int = 10
    noise_draws: int = 32
    shared_design: bool = True


@dataclass
class ConcentrationSettings:
    n: int = 200
    q_grid: list = field(default_factory=lambda: [50, 500])
    draws: int = 200
    instances: int = 10


@dataclass
class ExperimentConfig:
    kind: str
    seed: int = 0
    instance: InstanceConfig = field(default_factory=InstanceConfig)
    predictors: list = field(default_factory=list)  # of PredictorConfig
    n_grid: list = field(default_factory=list)
    replicates: int = 50
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    spectrum: SpectrumSettings = field(default_factory=SpectrumSettings)
    upstream: UpstreamSettings = field(default_factory=UpstreamSettings)
    concentration: ConcentrationSettings = field(default_factory=ConcentrationSettings)


# nested list element types that are themselves dataclasses
_LIST_ITEMS = {("ExperimentConfig", "predictors"): PredictorConfig}


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        hint = hints[key]
        item_cls = _LIST_ITEMS.get((cls.__name__, key))
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, sub)
        elif item_cls is not None:
            if not isinstance(value, list):
                raise ConfigError(f"{sub}: expected a list")
            kwargs[key] = [_build(item_cls, v, f"{sub}[{i}]") for i, v in enumerate(value)]
        else:
            kwargs[key] = _coerce(hint, value, sub)
    missing = [
        f.name
        for f in dataclasses.fields(cls)
        if f.name not in kwargs
        and f.default is dataclasses.MISSING
        and f.default_factory is dataclasses.MISSING
    ]
    if missing:
        raise ConfigError(f"{path or 'config'}: missing required key(s) {', '.join(missing)}")
    return cls(**kwargs)


def _coerce(hint, value, path):
    optional = typing.get_origin(hint) is typing.Union and type(None) in typing.get_args(hint)
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{path}: may not be null")
    base = typing.get_args(hint)[0] if optional else hint
    if base is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if base is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if base is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if base is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    if base is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        return value
    return value


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    need(cfg.kind in KINDS, f"kind must be one of {', '.join(KINDS)}")
    need(cfg.seed >= 0, "seed must be non-negative")
    inst = cfg.instance
    need(inst.p >= 1 and inst.q >= 1, "instance.p and instance.q must be positive")
    need(inst.covariance.kind in ("identity", "ar1", "wishart_jitter"), "unknown covariance kind")
    need(-1 < inst.covariance.rho < 1, "covariance.rho must lie in (-1, 1)")
    need(-1 < inst.feature_rho < 1, "instance.feature_rho must lie in (-1, 1)")
    need(inst.snr > 0 and inst.noise_var > 0, "snr and noise_var must be positive")
    need(inst.support is None or 1 <= inst.support <= inst.p, "instance.support must lie in [1, p]")
    need(all(isinstance(n, int) and n >= 1 for n in cfg.n_grid), "n_grid entries must be positive integers")
    names = [pr.name for pr in cfg.predictors]
    need(len(set(names)) == len(names), "predictor names must be unique")
    for pr in cfg.predictors:
        need(pr.kind in PREDICTOR_KINDS, f"predictor {pr.name}: kind must be one of {PREDICTOR_KINDS}")
        need(len(pr.lam) == 3 and all(isinstance(v, (int, float)) for v in pr.lam), f"predictor {pr.name}: lam needs 3 numbers")
        need(all(s in ("random", "ofp") for s in pr.starts), f"predictor {pr.name}: starts are random/ofp")
    need(cfg.replicates >= 2, "replicates must be at least 2")
    opt = cfg.optimizer
    need(opt.mode in ("avg", "worst"), "optimizer.mode must be avg or worst")
    need(opt.step_size > 0 and opt.episode_length >= 1 and opt.max_episodes >= 1, "bad optimizer schedule")
    need(cfg.spectrum.objective in ("avg", "worst"), "spectrum.objective must be avg or worst")
    up = cfg.upstream
    need(up.seeds >= 1 and up.noise_draws >= 1, "upstream.seeds and noise_draws must be positive")
    need(len(up.n_pre_grid) >= 2, "upstream.n_pre_grid needs at least two points")
    conc = cfg.concentration
    need(conc.draws >= 1 and conc.instances >= 1, "concentration draws/instances must be positive")
    needs_grid = cfg.kind in ("risk-curve", "ablation", "spectrum")
    need(not needs_grid or cfg.n_grid, f"{cfg.kind} needs a non-empty n_grid")
    need(cfg.kind not in ("full-opt", "heatmap") or len(cfg.n_grid) == 1, f"{cfg.kind} needs exactly one n in n_grid")
    return cfg


def from_dict(data: dict) -> ExperimentConfig:
    return validate(_build(ExperimentConfig, data, ""))


def load(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as err:
        raise ConfigError(f"cannot parse {path}: {err}") from err
    return from_dict(data or {})


def to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)
