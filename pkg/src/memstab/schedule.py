"""Discrete variance-preserving noise schedule."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal retention ``alpha_bar[t]`` plus the inference timesteps.

    ``inference_timesteps`` is strictly decreasing: element ``i`` is the training
    timestep evaluated at generation step ``i`` (noise -> data).
    """

    num_train_steps: int
    alpha_bar: np.ndarray = field(repr=False)
    inference_timesteps: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        ts = np.asarray(self.inference_timesteps, dtype=np.int64)
        object.__setattr__(self, "alpha_bar", ab)
        object.__setattr__(self, "inference_timesteps", ts)
        if self.num_train_steps < 1:
            raise ValueError("num_train_steps must be positive")
        if ab.shape != (self.num_train_steps,):
            raise ValueError("alpha_bar must have length num_train_steps")
        if not np.all((ab > 0) & (ab <= 1)):
            raise ValueError("alpha_bar must lie in (0, 1]")
        if np.any(np.diff(ab) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if ts.ndim != 1 or ts.size == 0:
            raise ValueError("inference_timesteps must be a non-empty 1-D sequence")
        if np.any(np.diff(ts) >= 0):
            raise ValueError("inference_timesteps must be strictly decreasing")
        if ts[0] >= self.num_train_steps or ts[-1] < 0:
            raise ValueError("inference_timesteps out of range")

    @property
    def T(self) -> int:
        return int(self.inference_timesteps.size)

    def step_alpha_bars(self) -> tuple[np.ndarray, np.ndarray]:
        """(alpha_bar at each step's timestep, alpha_bar the step lands on).

        The last step lands on alpha_bar = 1, i.e. the clean sample.
        """
        cur = self.alpha_bar[self.inference_timesteps]
        nxt = np.append(cur[1:], 1.0)
        return cur, nxt


def make_linear_schedule(num_train_steps: int = 1000, beta_start: float = 1e-4,
                         beta_end: float = 2e-2) -> NoiseSchedule:
    if num_train_steps < 1:
        raise ValueError("num_train_steps must be positive")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, num_train_steps, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - betas)
    return NoiseSchedule(num_train_steps, alpha_bar, np.arange(num_train_steps)[::-1].copy())


def select_inference_timesteps(schedule: NoiseSchedule, T: int = 50) -> NoiseSchedule:
    """Evenly strided descending timesteps ``(T-1)*stride, ..., stride, 0``."""
    n = schedule.num_train_steps
    if not (1 <= T <= n):
        raise ValueError(f"T must be in [1, {n}], got {T}")
    stride = n // T
    ts = (np.arange(T, dtype=np.int64) * stride)[::-1].copy()
    return replace(schedule, inference_timesteps=ts)
