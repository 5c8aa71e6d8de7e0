"""Noise schedule, forward noising, one-step recovery and ancestral sampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import Tensor, as_tensor


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        if self.T < 2:
            raise ValueError(f"T must be >= 2, got {self.T}")
        if self.beta.shape != (self.T + 1,) or self.alpha_bar.shape != (self.T + 1,):
            raise ValueError("beta and alpha_bar must have length T+1")
        ab = self.alpha_bar
        if ab[0] != 1.0 or np.any(np.diff(ab) >= 0) or np.any(ab <= 0) or np.any(ab > 1):
            raise ValueError("alpha_bar must start at 1 and decrease strictly inside (0, 1]")
        self.beta.setflags(write=False)
        self.alpha_bar.setflags(write=False)

    def check_t(self, t: int, lo: int = 0) -> int:
        if not lo <= int(t) <= self.T:
            raise ValueError(f"timestep {t} outside [{lo}, {self.T}]")
        return int(t)


def schedule_from_betas(betas) -> NoiseSchedule:
    """Build a schedule from per-step variances for steps 1..T (index 0 is unused)."""
    b = np.concatenate([[0.0], np.asarray(betas, dtype=np.float64)])
    if np.any(b[1:] <= 0) or np.any(b[1:] >= 1):
        raise ValueError("betas must lie in (0, 1)")
    return NoiseSchedule(len(b) - 1, b, np.cumprod(1.0 - b))


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return schedule_from_betas(np.linspace(beta_start, beta_end, T))


@dataclass
class ForwardSample:
    t: int
    z0: Tensor
    eps: Tensor
    zt: Tensor


def noise_at(alpha_bar: float, z0, eps) -> Tensor:
    z0, eps = as_tensor(z0), as_tensor(eps)
    if z0.shape != eps.shape:
        raise tn.ShapeError("add_noise", z0.shape, eps.shape)
    return np.sqrt(alpha_bar) * z0 + np.sqrt(1.0 - alpha_bar) * eps


def add_noise(schedule: NoiseSchedule, z0, t: int, eps) -> Tensor:
    """z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps."""
    t = schedule.check_t(t)
    return noise_at(float(schedule.alpha_bar[t]), z0, eps)


def forward_sample(schedule: NoiseSchedule, z0, t: int, rng: np.random.Generator) -> ForwardSample:
    z0 = as_tensor(z0)
    eps = Tensor(rng.standard_normal(z0.shape))
    return ForwardSample(t, z0, eps, add_noise(schedule, z0, t, eps))


def recover_z0(schedule: NoiseSchedule, zt, t: int, eps_pred) -> Tensor:
    """Single-step estimate of the clean latent; differentiable in ``eps_pred``."""
    t = schedule.check_t(t, lo=1)
    ab = float(schedule.alpha_bar[t])
    zt, eps_pred = as_tensor(zt), as_tensor(eps_pred)
    if zt.shape != eps_pred.shape:
        raise tn.ShapeError("recover_z0", zt.shape, eps_pred.shape)
    return (zt - np.sqrt(1.0 - ab) * eps_pred) * (1.0 / np.sqrt(ab))


def mse(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise tn.ShapeError("mse", pred.shape, target.shape)
    return tn.mean(tn.square(pred - target))


def diffusion_loss(eps_pred1, eps1, eps_pred2, eps2) -> Tensor:
    """Per-element MSE of each forward, summed over the two forwards."""
    return mse(eps_pred1, eps1) + mse(eps_pred2, eps2)


def sampling_timesteps(T: int, steps: int) -> list[int]:
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in [1, {T}], got {steps}")
    ts = np.round(np.linspace(T, 0, steps + 1)).astype(int)
    return [int(t) for t in ts]


def sample(
    schedule: NoiseSchedule,
    denoiser,
    condition,
    steps: int,
    rng: np.random.Generator,
    *,
    label=0,
    shape: tuple[int, ...] | None = None,
    clip: float | None = 1.0,
) -> np.ndarray:
    """Ancestral reverse chain over ``steps`` evenly spaced timesteps.

    ``denoiser`` is called as ``denoiser(z_t, t, label, condition)`` and must
    return the predicted noise.  Each transition t -> s uses the DDPM
    posterior q(z_s | z_t, z0_hat) of the respaced chain; with ``steps=1`` this
    is exactly one ``recover_z0`` from pure noise.  ``clip`` bounds z0_hat.
    """
    ts = sampling_timesteps(schedule.T, steps)
    if shape is None:
        cond = np.asarray(getattr(condition, "data", condition))
        shape = cond.shape[:3] + (denoiser.channels,)
    z = rng.standard_normal(shape)
    ab = schedule.alpha_bar
    with tn.no_grad():
        for t, s in zip(ts[:-1], ts[1:]):
            eps = denoiser(Tensor(z), t, label, condition)
            eps = eps.data if isinstance(eps, Tensor) else np.asarray(eps)
            x0 = recover_z0(schedule, z, t, eps).data
            if clip is not None:
                x0 = np.clip(x0, -clip, clip)
            ab_t, ab_s = ab[t], ab[s]
            beta = 1.0 - ab_t / ab_s
            c0 = np.sqrt(ab_s) * beta / (1.0 - ab_t)
            ct = np.sqrt(1.0 - beta) * (1.0 - ab_s) / (1.0 - ab_t)
            var = beta * (1.0 - ab_s) / (1.0 - ab_t)
            z = c0 * x0 + ct * z
            if s > 0:
                z = z + np.sqrt(var) * rng.standard_normal(shape)
    return z
