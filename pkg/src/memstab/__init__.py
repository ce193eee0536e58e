"""Stability-region memorization detection and mitigation for diffusion samplers.

Analytic Gaussian-mixture noise predictors stand in for a trained denoiser, so
every quantity along a sampling trajectory is exact and cheap to recompute.
"""

from memstab.schedule import NoiseSchedule, make_linear_schedule, select_inference_timesteps
from memstab.score import (
    GaussianComponent,
    GuidanceConfig,
    ScoreModelSpec,
    cfg_combine,
    dominance_factor,
    noise_prediction,
)
from memstab.sampler import StepRecord, Trajectory, sample_trajectory
from memstab.stability import StabilityInterval, StabilityProfile, collect_profile
from memstab.mitigation import MitigationHook, MitigationPolicy

__version__ = "0.1.0"

__all__ = [
    "NoiseSchedule",
    "make_linear_schedule",
    "select_inference_timesteps",
    "GaussianComponent",
    "GuidanceConfig",
    "ScoreModelSpec",
    "cfg_combine",
    "dominance_factor",
    "noise_prediction",
    "StepRecord",
    "Trajectory",
    "sample_trajectory",
    "StabilityInterval",
    "StabilityProfile",
    "collect_profile",
    "MitigationHook",
    "MitigationPolicy",
]
