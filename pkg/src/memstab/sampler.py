"""Deterministic reverse-process integrators with a per-step hook.

All three samplers integrate the probability-flow ODE in DDIM's normalised
coordinates ``x = z / sqrt(ab)``, ``sigma = sqrt((1 - ab) / ab)``, where the exact
flow is ``dx/dsigma = eps``. A single explicit Euler step in these coordinates is
the DDIM update; PNDM replaces it with Adams-Bashforth extrapolation over the
last four noise predictions.

Generation step ``i`` evaluates the model at the state produced by step ``i-1``
(or the initial latent), advances it, and stores a :class:`StepRecord` for the
new state. The hook runs after the state update and may replace the latent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Literal, Optional, Sequence

import numpy as np

from memstab.schedule import NoiseSchedule
from memstab.score import GuidanceConfig, cfg_combine, noise_prediction

SamplerKind = Literal["euler", "ddim", "pndm"]
SAMPLER_KINDS = ("euler", "ddim", "pndm")

# Adams-Bashforth weights, newest evaluation first; orders 1-3 serve as warmup.
AB_WEIGHTS = {
    1: np.array([1.0]),
    2: np.array([3.0, -1.0]) / 2.0,
    3: np.array([23.0, -16.0, 5.0]) / 12.0,
    4: np.array([55.0, -59.0, 37.0, -9.0]) / 24.0,
}

DIVERGENCE_LIMIT = 1e6


def initial_latent(seed: int, dimension: int) -> np.ndarray:
    """Standard-normal starting latent drawn from numpy's PCG64 seeded with ``seed``."""
    return np.random.default_rng(seed).standard_normal(dimension)


def reconstruct_z0(z_t: np.ndarray, eps: np.ndarray, alpha_bar_t: float) -> np.ndarray:
    if not alpha_bar_t > 0:
        raise ValueError(f"alpha_bar_t must be positive, got {alpha_bar_t}")
    if alpha_bar_t > 1:
        raise ValueError(f"alpha_bar_t must be <= 1, got {alpha_bar_t}")
    return (np.asarray(z_t) - math.sqrt(1.0 - alpha_bar_t) * np.asarray(eps)) / math.sqrt(alpha_bar_t)


def ddim_step(z_t: np.ndarray, eps: np.ndarray, alpha_bar_t: float, alpha_bar_prev: float) -> np.ndarray:
    """Deterministic DDIM update from ``alpha_bar_t`` to the less noisy ``alpha_bar_prev``."""
    if not (0 < alpha_bar_prev <= 1):
        raise ValueError(f"alpha_bar_prev must be in (0, 1], got {alpha_bar_prev}")
    z0 = reconstruct_z0(z_t, eps, alpha_bar_t)
    return math.sqrt(alpha_bar_prev) * z0 + math.sqrt(1.0 - alpha_bar_prev) * np.asarray(eps)


def euler_step(z_t: np.ndarray, f_value: np.ndarray, dt: float) -> np.ndarray:
    return np.asarray(z_t) - dt * np.asarray(f_value)


def pndm_step(history: Sequence[np.ndarray], z_t: np.ndarray, dt: float) -> np.ndarray:
    """AB4 update ``z + dt * sum_i b_i f_i``; ``history`` is newest-first."""
    if len(history) < 4:
        raise ValueError(f"AB4 needs 4 history entries, got {len(history)}; use the warmup path")
    return ab_step(history[:4], z_t, dt)


def ab_step(history: Sequence[np.ndarray], z_t: np.ndarray, dt: float) -> np.ndarray:
    """Adams-Bashforth step of order ``len(history)`` (1 to 4)."""
    b = AB_WEIGHTS[len(history)]
    acc = np.zeros_like(np.asarray(z_t, dtype=np.float64))
    for bi, fi in zip(b, history):
        acc = acc + bi * np.asarray(fi)
    return np.asarray(z_t) + dt * acc


def _norm(v: np.ndarray) -> float:
    # cheaper than np.linalg.norm for the short vectors used here
    return math.sqrt(float(np.dot(v, v)))


def _sigma(alpha_bar: float) -> float:
    return math.sqrt((1.0 - alpha_bar) / alpha_bar)


@dataclass
class StepRecord:
    step_index: int
    train_timestep: int
    latent: np.ndarray
    update: np.ndarray
    z0_hat: np.ndarray
    eps_cond_norm: float
    eps_uncond_norm: float
    guidance_norm: float
    mitigation_applied: list[str] = field(default_factory=list)
    update_norm: Optional[float] = None
    latent_norm: Optional[float] = None
    z0_hat_norm: Optional[float] = None

    def __post_init__(self):
        if self.update_norm is None or self.latent_norm is None or self.z0_hat_norm is None:
            self.refresh_norms()

    def refresh_norms(self):
        self.update_norm = _norm(self.update)
        self.latent_norm = _norm(self.latent)
        self.z0_hat_norm = _norm(self.z0_hat)

    def to_json_dict(self, norms_only: bool = False) -> dict:
        return {
            "step_index": self.step_index,
            "train_timestep": self.train_timestep,
            "latent": None if norms_only else [float(x) for x in self.latent],
            "update_norm": self.update_norm,
            "latent_norm": self.latent_norm,
            "z0_hat_norm": self.z0_hat_norm,
            "eps_cond_norm": self.eps_cond_norm,
            "eps_uncond_norm": self.eps_uncond_norm,
            "guidance_norm": self.guidance_norm,
            "mitigation_applied": list(self.mitigation_applied),
        }


CHANNELS = ("delta", "latent", "z0")
_CHANNEL_ATTR = {"delta": "update_norm", "latent": "latent_norm", "z0": "z0_hat_norm"}


@dataclass
class Trajectory:
    records: list[StepRecord]
    seed: int
    sampler_kind: str
    guidance: Optional[GuidanceConfig] = None
    mem_type_final: str = "none"
    diverged: bool = False
    scenario: str = ""

    @property
    def T(self) -> int:
        return len(self.records)

    @property
    def final_latent(self) -> np.ndarray:
        return self.records[-1].latent

    def norms(self, channel: str) -> np.ndarray:
        attr = _CHANNEL_ATTR[channel]
        return np.array([getattr(r, attr) for r in self.records])


@dataclass(slots=True)
class StepContext:
    """State handed to the hook after a step; the hook appends to ``actions``."""

    step_index: int
    train_timestep: int
    latent: np.ndarray
    previous_latent: np.ndarray
    eps: np.ndarray
    update: np.ndarray
    z0_hat: np.ndarray
    alpha_bar: float
    update_norm: float
    latent_norm: float
    z0_hat_norm: float
    actions: list[str] = field(default_factory=list)


Hook = Callable[[StepContext], Optional[np.ndarray]]


def sample_trajectory(sampler_kind: str, schedule: NoiseSchedule, guidance: GuidanceConfig,
                      initial: np.ndarray, hook: Optional[Hook] = None, seed: int = -1,
                      scenario: str = "") -> Trajectory:
    """Run ``schedule.T`` generation steps from ``initial`` and record every state.

    A step whose latent leaves ``[-1e6, 1e6]`` (or goes non-finite) stops the run;
    the trajectory is returned truncated with ``diverged=True``.
    """
    if sampler_kind not in SAMPLER_KINDS:
        raise ValueError(f"unknown sampler {sampler_kind!r}")
    cur_ab, next_ab = schedule.step_alpha_bars()
    cur_ab = cur_ab.tolist()
    next_ab = next_ab.tolist()
    timesteps = schedule.inference_timesteps.tolist()
    w = guidance.scale
    cond, uncond = guidance.conditional, guidance.unconditional

    z = np.array(initial, dtype=np.float64)
    if z.shape != (guidance.dimension,):
        raise ValueError(f"initial latent must have shape ({guidance.dimension},)")
    history: list[np.ndarray] = []
    records: list[StepRecord] = []
    diverged = False

    for i, t in enumerate(timesteps):
        ab, ab_next = cur_ab[i], next_ab[i]
        eps_c = noise_prediction(cond, z, ab)
        eps_u = noise_prediction(uncond, z, ab)
        eps = cfg_combine(eps_c, eps_u, w)

        if sampler_kind == "ddim":
            z_new = ddim_step(z, eps, ab, ab_next)
        else:
            dt = _sigma(ab) - _sigma(ab_next)
            x = z / math.sqrt(ab)
            if sampler_kind == "euler":
                x_new = euler_step(x, eps, dt)
            else:
                history.insert(0, -eps)
                del history[4:]
                x_new = pndm_step(history, x, dt) if len(history) == 4 else ab_step(history, x, dt)
            z_new = math.sqrt(ab_next) * x_new

        if not np.all(np.abs(z_new) <= DIVERGENCE_LIMIT):
            diverged = True
            break

        update = z_new - z if i > 0 else np.zeros_like(z)
        z0_hat = reconstruct_z0(z_new, eps, ab_next)
        norms = (_norm(update), _norm(z_new), _norm(z0_hat))
        actions: list[str] = []
        if hook is not None:
            replacement = hook(StepContext(i, t, z_new, z, eps, update, z0_hat, ab_next, *norms, actions))
            if replacement is not None:
                z_new = np.asarray(replacement, dtype=np.float64)
                if not np.all(np.abs(z_new) <= DIVERGENCE_LIMIT):
                    diverged = True
                    break
                if i > 0:
                    update = z_new - z
                z0_hat = reconstruct_z0(z_new, eps, ab_next)
                norms = (_norm(update), _norm(z_new), _norm(z0_hat))

        records.append(StepRecord(
            i, t, z_new, update, z0_hat,
            _norm(eps_c), _norm(eps_u), _norm(eps_c - eps_u), actions, *norms,
        ))
        z = z_new

    mem_type = getattr(hook, "mem_type", "none") if hook is not None else "none"
    return Trajectory(records, seed, sampler_kind, guidance, mem_type, diverged, scenario)
