"""Empirical stability regions of per-step norm channels."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from memstab.sampler import CHANNELS, Trajectory


@dataclass(frozen=True)
class StabilityInterval:
    lower: float
    upper: float

    def __post_init__(self):
        if self.lower > self.upper:
            raise ValueError(f"empty interval [{self.lower}, {self.upper}]")

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper

    def clip(self, value: float) -> float:
        return min(max(value, self.lower), self.upper)


@dataclass(frozen=True)
class StabilityProfile:
    """Per-step (mu, sigma) of ||delta||, ||z|| and ||z0_hat|| over reference runs.

    Arrays are indexed by generation step. The delta channel has no usable
    statistics at step 0, where the update is zero by convention.
    """

    gamma: float
    reference_count: int
    mu_delta: np.ndarray
    sigma_delta: np.ndarray
    mu_latent: np.ndarray
    sigma_latent: np.ndarray
    mu_z0: np.ndarray
    sigma_z0: np.ndarray

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        T = len(self.mu_delta)
        for name in ("mu_delta", "sigma_delta", "mu_latent", "sigma_latent", "mu_z0", "sigma_z0"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (T,):
                raise ValueError(f"{name} has shape {arr.shape}, expected ({T},)")
            if np.any(arr < 0):
                raise ValueError(f"{name} must be nonnegative")
            object.__setattr__(self, name, arr)

    @property
    def T(self) -> int:
        return int(self.mu_delta.size)

    def stats(self, channel: str) -> tuple[np.ndarray, np.ndarray]:
        if channel not in CHANNELS:
            raise ValueError(f"unknown channel {channel!r}")
        return getattr(self, f"mu_{channel}"), getattr(self, f"sigma_{channel}")

    def usable(self, channel: str, step: int) -> bool:
        return not (channel == "delta" and step == 0)

    def with_gamma(self, gamma: float) -> "StabilityProfile":
        return StabilityProfile(gamma, self.reference_count, self.mu_delta, self.sigma_delta,
                                self.mu_latent, self.sigma_latent, self.mu_z0, self.sigma_z0)

    def to_dict(self) -> dict:
        out = {"gamma": self.gamma, "reference_count": self.reference_count}
        for ch in CHANNELS:
            mu, sd = self.stats(ch)
            out[f"mu_{ch}"] = mu.tolist()
            out[f"sigma_{ch}"] = sd.tolist()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "StabilityProfile":
        return cls(float(data["gamma"]), int(data["reference_count"]),
                   *(np.asarray(data[f"{p}_{ch}"], dtype=np.float64)
                     for ch in CHANNELS for p in ("mu", "sigma")))

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "StabilityProfile":
        return cls.from_dict(json.loads(Path(path).read_text()))


def collect_profile(reference: Sequence[Trajectory], gamma: float = 3.0) -> StabilityProfile:
    """Two-pass mean and population std of each channel at each step."""
    if len(reference) < 2:
        raise ValueError("need at least 2 reference trajectories to estimate sigma")
    if any(tr.diverged for tr in reference):
        raise ValueError("reference trajectories must not diverge")
    T = reference[0].T
    if any(tr.T != T for tr in reference):
        raise ValueError("reference trajectories have mixed lengths")
    cols = []
    for ch in CHANNELS:
        vals = np.stack([tr.norms(ch) for tr in reference])  # (N, T)
        mu = vals.mean(axis=0)
        sd = np.sqrt(((vals - mu) ** 2).mean(axis=0))
        cols += [mu, sd]
    return StabilityProfile(float(gamma), len(reference), *cols)


def _check(profile: StabilityProfile, channel: str, step: int):
    if not (0 <= step < profile.T):
        raise ValueError(f"step {step} out of range [0, {profile.T})")
    if not profile.usable(channel, step):
        raise ValueError(f"channel {channel!r} has no statistics at step {step}")


def region(profile: StabilityProfile, channel: str, step: int) -> StabilityInterval:
    _check(profile, channel, step)
    mu, sd = profile.stats(channel)
    m, s = float(mu[step]), float(sd[step])
    return StabilityInterval(max(0.0, m - profile.gamma * s), m + profile.gamma * s)


def sigma_floor(mu: float) -> float:
    return 1e-9 * max(mu, 1.0)


def zscore(profile: StabilityProfile, channel: str, step: int, value: float) -> float:
    _check(profile, channel, step)
    mu, sd = profile.stats(channel)
    m = float(mu[step])
    return abs(value - m) / max(float(sd[step]), sigma_floor(m))


def zscores(profile: StabilityProfile, channel: str, values: np.ndarray) -> np.ndarray:
    """Vectorised :func:`zscore` over a full per-step series (NaN where unusable)."""
    mu, sd = profile.stats(channel)
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[-1]
    denom = np.maximum(sd[:n], 1e-9 * np.maximum(mu[:n], 1.0))
    out = np.abs(values - mu[:n]) / denom
    if channel == "delta":
        out[..., 0] = np.nan
    return out


def violation_rate(profile: StabilityProfile, trajectories: Sequence[Trajectory], channel: str) -> float:
    """Fraction of (trajectory, usable step) pairs whose norm falls outside the region."""
    hits = total = 0
    lo_hi = {}
    for tr in trajectories:
        vals = tr.norms(channel)
        for i, v in enumerate(vals):
            if not profile.usable(channel, i):
                continue
            if i not in lo_hi:
                lo_hi[i] = region(profile, channel, i)
            total += 1
            hits += not lo_hi[i].contains(float(v))
    return hits / total if total else 0.0


def trajectory_violation_fraction(profile: StabilityProfile, trajectories: Sequence[Trajectory],
                                  channel: str) -> float:
    """Fraction of trajectories with at least one out-of-region step."""
    if not trajectories:
        return 0.0
    bad = 0
    for tr in trajectories:
        z = zscores(profile, channel, tr.norms(channel))
        bad += bool(np.nanmax(z) > profile.gamma)
    return bad / len(trajectories)
