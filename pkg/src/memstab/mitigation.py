"""Two-level on-the-fly mitigation run as a sampler hook."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from memstab.sampler import StepContext
from memstab.stability import StabilityProfile, region, zscore

MEM_TYPES = ("none", "mild", "strong")


@dataclass(frozen=True)
class MitigationPolicy:
    tau_mild: float = 3.0
    tau_strong: float = 14.0
    mild_steps_k: int = 10
    constrain_latent: bool = True
    constrain_delta: bool = True
    # Count the mild window in training timesteps (t < k, i.e. the final k steps)
    # instead of generation steps.
    mild_window_by_timestep: bool = False
    rescale_z0: bool = True

    def __post_init__(self):
        if not (0 < self.tau_mild < self.tau_strong):
            raise ValueError("need 0 < tau_mild < tau_strong")
        if self.mild_steps_k < 1:
            raise ValueError("mild_steps_k must be >= 1")

    @property
    def active(self) -> bool:
        return self.rescale_z0 or self.constrain_latent or self.constrain_delta


@dataclass
class MitigationState:
    mem_type: str = "none"
    first_trigger_step: Optional[int] = None
    events: list[tuple[int, str]] = field(default_factory=list)


def rescale(v: np.ndarray, target_norm: float) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise ValueError("cannot rescale a zero vector")
    return (target_norm / n) * v


def classify(state: MitigationState, s_delta: float, s_z0: float, policy: MitigationPolicy,
             step: Optional[int] = None) -> MitigationState:
    """Set the severity once, on the first step whose delta score exceeds tau_mild.

    If s_z0 is not above tau_mild at that step the state stays ``none`` and a
    later step may still trigger.
    """
    if state.mem_type != "none" or not s_delta > policy.tau_mild:
        return state
    if s_z0 > policy.tau_strong:
        state.mem_type = "strong"
    elif s_z0 > policy.tau_mild:
        state.mem_type = "mild"
    else:
        return state
    state.first_trigger_step = step
    return state


def _radial_clamp(v: np.ndarray, norm: float, target: float) -> np.ndarray:
    return v * (target / norm)


class MitigationHook:
    """Sampler hook applying the stability-constrained adaptive correction.

    The latent handed back after a z0 rescale is the forward reprojection
    ``sqrt(ab) * z0 + sqrt(1 - ab) * eps`` with the step's own noise prediction.
    """

    def __init__(self, profile: StabilityProfile, policy: MitigationPolicy = MitigationPolicy()):
        self.profile = profile
        self.policy = policy
        self.state = MitigationState()
        mu, sd = profile.stats("delta")
        self._mu_delta = mu.tolist()
        self._sd_delta = [max(s, 1e-9 * max(m, 1.0)) for m, s in zip(self._mu_delta, sd.tolist())]

    @property
    def mem_type(self) -> str:
        return self.state.mem_type

    def reset(self):
        self.state = MitigationState()

    def __call__(self, ctx: StepContext) -> Optional[np.ndarray]:
        # until the first trigger nothing happens below tau_mild; skip the full path
        if self.state.mem_type == "none" and self.policy.active:
            i = ctx.step_index
            if i == 0 or abs(ctx.update_norm - self._mu_delta[i]) / self._sd_delta[i] <= self.policy.tau_mild:
                return None
        return apply(ctx, self.state, self.policy, self.profile)


def _in_mild_window(ctx: StepContext, policy: MitigationPolicy) -> bool:
    if policy.mild_window_by_timestep:
        return ctx.train_timestep < policy.mild_steps_k
    return ctx.step_index < policy.mild_steps_k


def apply(ctx: StepContext, state: MitigationState, policy: MitigationPolicy,
          profile: StabilityProfile) -> Optional[np.ndarray]:
    """Classify and correct one step; returns the replacement latent or ``None``."""
    if not policy.active:
        return None
    i = ctx.step_index
    has_delta = profile.usable("delta", i)
    s_delta = zscore(profile, "delta", i, ctx.update_norm) if has_delta else 0.0
    s_z0 = zscore(profile, "z0", i, ctx.z0_hat_norm)
    classify(state, s_delta, s_z0, policy, i)
    if state.mem_type == "none":
        return None

    strong = state.mem_type == "strong"
    z = ctx.latent
    actions = []

    if strong:
        do_rescale = s_z0 > policy.tau_mild
    else:
        do_rescale = (_in_mild_window(ctx, policy) and s_delta > policy.tau_mild
                      and policy.tau_mild < s_z0 <= policy.tau_strong)
    if policy.rescale_z0 and do_rescale:
        if ctx.z0_hat_norm == 0.0:
            state.events.append((i, "skip_rescale_zero_z0"))
        else:
            z0 = rescale(ctx.z0_hat, float(profile.mu_z0[i]))
            ab = ctx.alpha_bar
            z = math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * ctx.eps
            actions.append("rescale_z0")

    if policy.constrain_latent:
        delta_out = has_delta and not region(profile, "delta", i).contains(ctx.update_norm)
        if strong or delta_out:
            box = region(profile, "latent", i)
            n = float(np.linalg.norm(z))
            if n > 0 and not box.contains(n):
                z = _radial_clamp(z, n, box.clip(n))
                actions.append("clamp_z")

    if strong and policy.constrain_delta and has_delta:
        d = z - ctx.previous_latent
        n = float(np.linalg.norm(d))
        box = region(profile, "delta", i)
        if n > 0 and not box.contains(n):
            z = ctx.previous_latent + _radial_clamp(d, n, box.clip(n))
            actions.append("clamp_delta")

    if not actions:
        return None
    for a in actions:
        state.events.append((i, a))
    ctx.actions.extend(actions)
    return z
