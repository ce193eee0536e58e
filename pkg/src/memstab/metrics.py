"""Outcome metrics for synthetic scenarios."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


@dataclass(frozen=True)
class OutcomeSummary:
    replica_rate: float
    diverged_rate: float
    mean_wall_time_per_trajectory: float
    mitigation_action_rate: float

    def __post_init__(self):
        for name in ("replica_rate", "diverged_rate"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must be in [0, 1], got {v}")


def replica_rate(final_latents: Sequence[np.ndarray], mem_target: np.ndarray, epsilon: float) -> float:
    if len(final_latents) == 0:
        raise ValueError("no latents")
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    z = np.asarray(final_latents, dtype=np.float64)
    target = np.asarray(mem_target, dtype=np.float64)
    if z.shape[-1] != target.shape[-1]:
        raise ValueError("dimension mismatch")
    return float(np.mean(np.linalg.norm(z - target, axis=-1) <= epsilon))


def default_replica_epsilon(means: np.ndarray, target: np.ndarray) -> float:
    """Half the distance from the target to the nearest other mixture mean."""
    d = np.linalg.norm(np.asarray(means) - np.asarray(target), axis=1)
    d = d[d > 1e-12]
    if d.size == 0:
        raise ValueError("no other mixture mean to separate from")
    return 0.5 * float(d.min())


def _integrate(solver: str, rhs: Callable[[float, float], float], exact: Callable[[float], float],
               t_end: float, n: int) -> float:
    from memstab.sampler import ab_step, euler_step

    h = t_end / n
    t, y = 0.0, exact(0.0)
    if solver == "euler":
        for _ in range(n):
            y = float(euler_step(y, -rhs(t, y), h))
            t += h
        return y
    if solver != "ab4":
        raise ValueError(f"unknown solver {solver!r}")
    # exact-history warmup: the first three states come from the true solution
    hist = [rhs(k * h, exact(k * h)) for k in range(3, -1, -1)]  # newest first
    y = exact(3 * h)
    t = 3 * h
    for k in range(3, n):
        y = float(ab_step(hist, y, h))
        t = (k + 1) * h
        hist = [rhs(t, y)] + hist[:3]
    return y


def measure_order(solver: str, lam: float = -1.0, y0: float = 1.0, t_end: float = 1.0,
                  step_counts: Sequence[int] = (20, 40, 80, 160)) -> float:
    """Least-squares slope of log(error) against log(h) on y' = lam * y.

    Returns ``inf`` when every error is exactly zero (the method is exact).
    """
    exact = lambda t: y0 * math.exp(lam * t)  # noqa: E731
    rhs = lambda t, y: lam * y  # noqa: E731
    hs, errs = [], []
    for n in step_counts:
        errs.append(abs(_integrate(solver, rhs, exact, t_end, n) - exact(t_end)))
        hs.append(t_end / n)
    errs = np.array(errs)
    if np.all(errs == 0):
        return float("inf")
    keep = errs > 0
    slope = np.polyfit(np.log(np.array(hs)[keep]), np.log(errs[keep]), 1)[0]
    return float(slope)


def overhead(unmitigated_times: Sequence[float], mitigated_times: Sequence[float]) -> float:
    if len(unmitigated_times) == 0 or len(mitigated_times) == 0:
        raise ValueError("need timings for both runs")
    base = float(np.mean(unmitigated_times))
    return (float(np.mean(mitigated_times)) - base) / base
