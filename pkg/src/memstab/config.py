"""Experiment configuration: loading, validation and object construction."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from memstab.mitigation import MitigationPolicy
from memstab.schedule import NoiseSchedule, make_linear_schedule, select_inference_timesteps
from memstab.score import LABELS, GuidanceConfig, ScoreModelSpec

SECTIONS = ("schedule", "scenarios", "guidance", "stability", "detection", "mitigation", "experiment")
SCENARIOS = ("unconditional", "normal", "mild", "strong")


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field (``a.b[2].c``)."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


def default_config_path() -> Path:
    return Path(str(resources.files("memstab") / "configs" / "default.json"))


def _get(d: dict, key: str, path: str) -> Any:
    if not isinstance(d, dict):
        raise ConfigError(path, "expected an object")
    if key not in d:
        raise ConfigError(f"{path}.{key}" if path else key, "missing")
    return d[key]


def _num(d: dict, key: str, path: str, *, lo=None, hi=None, integer=False, lo_open=False) -> float:
    p = f"{path}.{key}"
    v = _get(d, key, path)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(p, f"expected a number, got {type(v).__name__}")
    if integer and int(v) != v:
        raise ConfigError(p, f"expected an integer, got {v}")
    if lo is not None and (v <= lo if lo_open else v < lo):
        raise ConfigError(p, f"must be {'>' if lo_open else '>='} {lo}, got {v}")
    if hi is not None and v > hi:
        raise ConfigError(p, f"must be <= {hi}, got {v}")
    return int(v) if integer else float(v)


def _bool(d: dict, key: str, path: str) -> bool:
    v = _get(d, key, path)
    if not isinstance(v, bool):
        raise ConfigError(f"{path}.{key}", "expected true or false")
    return v


def _int_list(d: dict, key: str, path: str, lo: int = 1) -> list[int]:
    v = _get(d, key, path)
    if not isinstance(v, list) or not v:
        raise ConfigError(f"{path}.{key}", "expected a non-empty list")
    for i, x in enumerate(v):
        if isinstance(x, bool) or not isinstance(x, int) or x < lo:
            raise ConfigError(f"{path}.{key}[{i}]", f"expected an integer >= {lo}")
    return list(v)


def _model(d: dict, path: str, dim: int) -> ScoreModelSpec:
    comps = _get(d, "components", path)
    if not isinstance(comps, list) or not comps:
        raise ConfigError(f"{path}.components", "expected a non-empty list")
    for i, c in enumerate(comps):
        cp = f"{path}.components[{i}]"
        mean = _get(c, "mean", cp)
        if not isinstance(mean, list) or len(mean) != dim:
            raise ConfigError(f"{cp}.mean", f"expected a list of {dim} numbers")
        if not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in mean):
            raise ConfigError(f"{cp}.mean", "entries must be numbers")
        _num(c, "variance", cp, lo=0, lo_open=True)
        if "weight" in c:
            _num(c, "weight", cp, lo=0, lo_open=True)
    label = d.get("label", "unconditional")
    if label not in LABELS:
        raise ConfigError(f"{path}.label", f"must be one of {LABELS}")
    if "sigma_mem" in d:
        _num(d, "sigma_mem", path, lo=0, lo_open=True)
    try:
        return ScoreModelSpec.from_dict(d, name=path.rsplit(".", 1)[-1])
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from None


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated view of the JSON document plus the objects it describes."""

    raw: dict
    schedule: NoiseSchedule
    models: dict
    guidance_scale: float
    gamma: float
    reference_count: int
    reference_seed_start: int
    policy: MitigationPolicy

    @property
    def dimension(self) -> int:
        return int(self.raw["scenarios"]["dimension"])

    @property
    def T(self) -> int:
        return self.schedule.T

    def guidance(self, scenario: str) -> GuidanceConfig:
        if scenario not in ("normal", "mild", "strong"):
            raise ValueError(f"unknown conditional scenario {scenario!r}")
        return GuidanceConfig(self.models[scenario], self.models["unconditional"], self.guidance_scale)

    def mem_target(self, scenario: str) -> np.ndarray:
        return self.models[scenario].sharpest_mean()

    def section(self, name: str) -> dict:
        return self.raw[name]

    @property
    def hash(self) -> str:
        return config_hash(self.raw)


def config_hash(raw: dict) -> str:
    blob = json.dumps(raw, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def validate(raw: Any) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("$", "config must be a JSON object")
    for s in SECTIONS:
        if not isinstance(raw.get(s), dict):
            raise ConfigError(s, "missing section" if s not in raw else "expected an object")

    sch = raw["schedule"]
    n = _num(sch, "num_train_steps", "schedule", lo=2, integer=True)
    b0 = _num(sch, "beta_start", "schedule", lo=0, lo_open=True, hi=1)
    b1 = _num(sch, "beta_end", "schedule", lo=0, lo_open=True, hi=1)
    if b0 > b1:
        raise ConfigError("schedule.beta_end", "must be >= beta_start")
    T = _num(sch, "inference_steps", "schedule", lo=2, hi=n, integer=True)
    schedule = select_inference_timesteps(make_linear_schedule(n, b0, b1), T)

    sc = raw["scenarios"]
    dim = _num(sc, "dimension", "scenarios", lo=1, integer=True)
    models = {name: _model(_get(sc, name, "scenarios"), f"scenarios.{name}", dim) for name in SCENARIOS}
    for name in ("mild", "strong"):
        if models[name].label != "memorized_conditional":
            raise ConfigError(f"scenarios.{name}.label", "must be memorized_conditional")

    w = _num(raw["guidance"], "scale", "guidance", lo=0)

    st = raw["stability"]
    gamma = _num(st, "gamma", "stability", lo=0, lo_open=True)
    ref = _num(st, "reference_count", "stability", lo=2, integer=True)
    ref_seed = _num(st, "reference_seed_start", "stability", lo=0, integer=True)

    det = raw["detection"]
    _num(det, "steps", "detection", lo=1, hi=T, integer=True)
    _num(det, "fpr", "detection", lo=0, lo_open=True, hi=0.5)
    grid = _int_list(det, "step_grid", "detection")
    for i, s in enumerate(grid):
        if s > T:
            raise ConfigError(f"detection.step_grid[{i}]", f"must be <= {T}")
    _int_list(det, "reference_sizes", "detection", lo=2)
    _int_list(det, "seed_groups", "detection")

    mit = raw["mitigation"]
    try:
        policy = MitigationPolicy(
            tau_mild=_num(mit, "tau_mild", "mitigation", lo=0, lo_open=True),
            tau_strong=_num(mit, "tau_strong", "mitigation", lo=0, lo_open=True),
            mild_steps_k=_num(mit, "mild_steps_k", "mitigation", lo=1, hi=T, integer=True),
            constrain_latent=_bool(mit, "constrain_latent", "mitigation"),
            constrain_delta=_bool(mit, "constrain_delta", "mitigation"),
            mild_window_by_timestep=_bool(mit, "mild_window_by_timestep", "mitigation"),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("mitigation.tau_strong", str(exc)) from None

    ex = raw["experiment"]
    samplers = _get(ex, "samplers", "experiment")
    if not isinstance(samplers, list) or not samplers:
        raise ConfigError("experiment.samplers", "expected a non-empty list")
    for i, k in enumerate(samplers):
        if k not in ("euler", "ddim", "pndm"):
            raise ConfigError(f"experiment.samplers[{i}]", f"unknown sampler {k!r}")
    _num(ex, "eval_count", "experiment", lo=2, integer=True)
    _num(ex, "eval_seed_start", "experiment", lo=0, integer=True)
    _num(ex, "timing_count", "experiment", lo=1, integer=True)
    gs = _get(ex, "gamma_sweep", "experiment")
    if not isinstance(gs, list) or not gs or not all(isinstance(g, (int, float)) and g > 0 for g in gs):
        raise ConfigError("experiment.gamma_sweep", "expected a non-empty list of positive numbers")
    if ex.get("replica_epsilon") is not None:
        _num(ex, "replica_epsilon", "experiment", lo=0, lo_open=True)

    return ExperimentConfig(copy.deepcopy(raw), schedule, models, w, gamma, ref, ref_seed, policy)


def load_config(path: str | Path | None = None) -> ExperimentConfig:
    p = Path(path) if path is not None else default_config_path()
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("$", f"not valid JSON ({exc.msg} at line {exc.lineno})") from None
    return validate(raw)
