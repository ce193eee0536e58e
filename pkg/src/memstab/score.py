"""Closed-form noise predictors for isotropic Gaussian mixtures, and CFG.

A mixture ``sum_i w_i N(mu_i, v_i I)`` pushed through the VP forward process is
again a mixture, with components ``N(sqrt(ab) mu_i, (ab v_i + 1 - ab) I)``, so the
optimal noise prediction ``eps* = -sqrt(1 - ab) grad log p_t`` is exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.special import logsumexp

Label = Literal["unconditional", "normal_conditional", "memorized_conditional"]
LABELS = ("unconditional", "normal_conditional", "memorized_conditional")


class DegenerateDensityError(ValueError):
    pass


@dataclass(frozen=True)
class GaussianComponent:
    mean: np.ndarray
    variance: float
    weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64).reshape(-1))
        if not self.variance > 0:
            raise ValueError(f"component variance must be positive, got {self.variance}")
        if not self.weight > 0:
            raise ValueError(f"component weight must be positive, got {self.weight}")


@dataclass(frozen=True)
class ScoreModelSpec:
    """Isotropic Gaussian mixture data distribution with an exact noise predictor.

    Weights are normalised on construction. A ``memorized_conditional`` model must
    contain a sharp component (variance <= sigma_mem**2); ``sigma_mem`` is stored
    so that mild scenarios can declare a wider sharp mode.
    """

    components: tuple[GaussianComponent, ...]
    label: Label = "unconditional"
    sigma_mem: float = 0.02
    name: str = ""
    _means: np.ndarray = field(init=False, repr=False, compare=False)
    _variances: np.ndarray = field(init=False, repr=False, compare=False)
    _log_weights: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise ValueError("a ScoreModelSpec needs at least one component")
        if self.label not in LABELS:
            raise ValueError(f"unknown label {self.label!r}")
        d = comps[0].mean.size
        if any(c.mean.size != d for c in comps):
            raise ValueError("all component means must share one dimension")
        total = sum(c.weight for c in comps)
        comps = tuple(GaussianComponent(c.mean, c.variance, c.weight / total) for c in comps)
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "_means", np.stack([c.mean for c in comps]))
        object.__setattr__(self, "_variances", np.array([c.variance for c in comps]))
        object.__setattr__(self, "_log_weights", np.log([c.weight for c in comps]))
        if self.label == "memorized_conditional" and not np.any(self._variances <= self.sigma_mem**2 * (1 + 1e-12)):
            raise ValueError("memorized_conditional model needs a component with variance <= sigma_mem**2")

    @property
    def dimension(self) -> int:
        return int(self._means.shape[1])

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self._log_weights)

    @property
    def means(self) -> np.ndarray:
        return self._means

    @property
    def variances(self) -> np.ndarray:
        return self._variances

    def sharpest_mean(self) -> np.ndarray:
        return self._means[int(np.argmin(self._variances))]

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "sigma_mem": self.sigma_mem,
            "components": [
                {"mean": c.mean.tolist(), "variance": c.variance, "weight": c.weight}
                for c in self.components
            ],
        }

    @classmethod
    def from_dict(cls, data: dict, name: str = "") -> "ScoreModelSpec":
        comps = tuple(
            GaussianComponent(np.asarray(c["mean"], dtype=np.float64), float(c["variance"]), float(c.get("weight", 1.0)))
            for c in data["components"]
        )
        return cls(comps, data.get("label", "unconditional"), float(data.get("sigma_mem", 0.02)), name)


@dataclass(frozen=True)
class GuidanceConfig:
    conditional: ScoreModelSpec
    unconditional: ScoreModelSpec
    scale: float = 7.5

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError("guidance scale must be >= 0")
        if self.conditional.dimension != self.unconditional.dimension:
            raise ValueError("conditional and unconditional models differ in dimension")

    @property
    def dimension(self) -> int:
        return self.conditional.dimension


def _noised_params(model: ScoreModelSpec, z: np.ndarray, alpha_bar_t: float):
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != model.dimension:
        raise ValueError(f"dimension mismatch: z has {z.shape[-1]}, model has {model.dimension}")
    if not (0 < alpha_bar_t <= 1):
        raise ValueError(f"alpha_bar_t must be in (0, 1], got {alpha_bar_t}")
    var_t = alpha_bar_t * model.variances + (1.0 - alpha_bar_t)
    if np.any(var_t <= 0):
        raise DegenerateDensityError("zero-variance component at alpha_bar_t = 1")
    diff = z[..., None, :] - np.sqrt(alpha_bar_t) * model.means  # (..., K, d)
    sq = np.einsum("...kd,...kd->...k", diff, diff)
    logits = model._log_weights - 0.5 * model.dimension * np.log(2 * np.pi * var_t) - 0.5 * sq / var_t
    return diff, var_t, logits


def log_density(model: ScoreModelSpec, z: np.ndarray, alpha_bar_t: float) -> np.ndarray:
    """log p_t(z) of the noised mixture."""
    _, _, logits = _noised_params(model, z, alpha_bar_t)
    return logsumexp(logits, axis=-1)


def noise_prediction(model: ScoreModelSpec, z: np.ndarray, alpha_bar_t: float) -> np.ndarray:
    """Exact eps*(z, t) = -sqrt(1 - ab) * grad_z log p_t(z); accepts batched ``z``."""
    diff, var_t, logits = _noised_params(model, z, alpha_bar_t)
    # posterior responsibilities, max-subtracted so sharp components don't underflow
    logits = logits - logits.max(axis=-1, keepdims=True)
    resp = np.exp(logits)
    resp /= resp.sum(axis=-1, keepdims=True)
    neg_score = np.einsum("...k,...kd->...d", resp / var_t, diff)
    return np.sqrt(1.0 - alpha_bar_t) * neg_score


def cfg_combine(eps_cond: np.ndarray, eps_uncond: np.ndarray, w: float) -> np.ndarray:
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError(f"shape mismatch {eps_cond.shape} vs {eps_uncond.shape}")
    return eps_uncond + w * (eps_cond - eps_uncond)


def dominance_factor(eps_cond: np.ndarray, eps_uncond: np.ndarray) -> float:
    """Empirical beta = ||eps_cond|| / ||eps_uncond||; ``inf`` when the denominator is 0."""
    den = float(np.linalg.norm(eps_uncond))
    num = float(np.linalg.norm(eps_cond))
    if den == 0.0:
        return float("inf")
    return num / den
