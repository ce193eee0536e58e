"""Trajectory memorization scores, the guidance-magnitude baseline, and ROC metrics."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from memstab.sampler import StepRecord, Trajectory
from memstab.stability import StabilityProfile, zscores


class InsufficientSampleWarning(UserWarning):
    pass


@dataclass(frozen=True)
class DetectionConfig:
    profile: StabilityProfile
    detection_steps: int = 3

    def __post_init__(self):
        if not (1 <= self.detection_steps <= self.profile.T):
            raise ValueError(f"detection_steps must be in [1, {self.profile.T}]")


@dataclass
class DetectionReport:
    scores: np.ndarray
    labels: list[str]
    step_scores: list[np.ndarray] = field(default_factory=list)


def step_scores(trajectory: Trajectory, profile: StabilityProfile) -> np.ndarray:
    """Delta-channel Z-score at every step (NaN at step 0)."""
    return zscores(profile, "delta", trajectory.norms("delta"))


def memorization_score(trajectory: Trajectory, config: DetectionConfig) -> float:
    """Max delta Z-score over generation steps 1..s.

    Step 0 carries no update, so ``s == T`` means every usable step (1..T-1).
    """
    s = config.detection_steps
    if s == trajectory.T == config.profile.T:
        s = trajectory.T - 1
    if trajectory.T < s + 1:
        raise ValueError(f"trajectory has {trajectory.T} steps, need at least {s + 1}")
    z = step_scores(trajectory, config.profile)
    return float(np.max(z[1:s + 1]))


def multi_seed_scores(groups: Sequence[Sequence[Trajectory]], config: DetectionConfig) -> np.ndarray:
    """Average S_mem over trajectories sharing a condition but differing in seed."""
    return np.array([np.mean([memorization_score(tr, config) for tr in g]) for g in groups])


def wen_guidance_magnitude(step: StepRecord) -> float:
    return float(step.guidance_norm)


def wen_score(trajectory: Trajectory, steps: int) -> float:
    """Baseline detector: mean guidance magnitude over the first ``steps`` steps."""
    return float(np.mean([wen_guidance_magnitude(r) for r in trajectory.records[:steps]]))


def calibrate_threshold(normal_scores: Sequence[float], target_fpr: float = 0.01) -> float:
    """Empirical ``1 - target_fpr`` quantile with "higher" interpolation.

    The threshold is always an observed score: the one at 0-based sorted index
    ``ceil((n - 1) * (1 - fpr))``, so {1..100} at fpr 0.01 gives 100. At most
    ``fpr * n`` normals score strictly above it. With fewer than
    ``1 / target_fpr`` scores the maximum is returned and an
    :class:`InsufficientSampleWarning` is emitted.
    """
    if not (0 < target_fpr < 1):
        raise ValueError("target_fpr must be in (0, 1)")
    x = np.asarray(normal_scores, dtype=np.float64)
    if x.size == 0:
        raise ValueError("no normal scores")
    if x.size < math.ceil(1.0 / target_fpr - 1e-9):
        warnings.warn(f"{x.size} scores is too few for fpr={target_fpr}", InsufficientSampleWarning, stacklevel=2)
        return float(x.max())
    return float(np.quantile(x, 1.0 - target_fpr, method="higher"))


def auc(memorized_scores: Sequence[float], normal_scores: Sequence[float]) -> float:
    """Mann-Whitney AUC: P(mem > normal) + 0.5 P(mem == normal)."""
    m = np.asarray(memorized_scores, dtype=np.float64)
    n = np.asarray(normal_scores, dtype=np.float64)
    if m.size == 0 or n.size == 0:
        raise ValueError("auc needs non-empty score lists")
    ns = np.sort(n)
    below = np.searchsorted(ns, m, side="left")
    upto = np.searchsorted(ns, m, side="right")
    return float((below.sum() + 0.5 * (upto - below).sum()) / (m.size * n.size))


def tpr_at_fpr(memorized_scores: Sequence[float], normal_scores: Sequence[float], fpr: float = 0.01) -> float:
    m = np.asarray(memorized_scores, dtype=np.float64)
    if m.size == 0 or len(normal_scores) == 0:
        raise ValueError("tpr_at_fpr needs non-empty score lists")
    thr = calibrate_threshold(normal_scores, fpr)
    return float(np.mean(m > thr))


def detect(trajectories: Sequence[Trajectory], config: DetectionConfig, labels: Sequence[str]) -> DetectionReport:
    scores = np.array([memorization_score(tr, config) for tr in trajectories])
    return DetectionReport(scores, list(labels), [step_scores(tr, config.profile) for tr in trajectories])
