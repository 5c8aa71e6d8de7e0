"""Uncertainty-aware reward losses.

Two forwards of the same clean latent at nearby timesteps produce two
recovered images; the frozen reward model's disagreement between them (KL for
class probabilities, absolute difference for scalar outputs) is the per-cell
uncertainty.  Consistency losses are divided by exp(U) and a lambda * U
penalty keeps the uncertainty from growing everywhere.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import diffusion as df
from . import tensor as tn
from .tensor import PROB_FLOOR, Tensor


@dataclass
class UncertaintyMap:
    values: Tensor  # (B, H, W)
    kind: str  # "kl" | "l1"


def consistency_loss(c, c_hat, kind: str = "cross_entropy") -> Tensor:
    """Per-cell loss map (B, H, W) between input condition ``c`` and ``c_hat``.

    ``cross_entropy`` expects (B, H, W, K) one-hot/probability ``c`` and a
    probability ``c_hat``; ``mse`` expects (B, H, W, 1) scalar maps.
    """
    c = tn.as_tensor(c)
    c_hat = tn.as_tensor(c_hat)
    if c.shape != c_hat.shape:
        raise tn.ShapeError("consistency_loss", c.shape, c_hat.shape)
    if kind == "cross_entropy":
        if c_hat.shape[-1] < 2:
            raise ValueError("cross_entropy needs a probability head with K >= 2 classes")
        logp = tn.log(tn.clamp(c_hat, PROB_FLOOR, 1.0))
        return -tn.sum(c * logp, axes=-1)
    if kind == "mse":
        if c_hat.shape[-1] != 1:
            raise ValueError("mse consistency needs a scalar head (last axis of size 1)")
        return tn.sum(tn.square(c - c_hat), axes=-1)
    raise ValueError(f"unknown consistency loss {kind!r}")


def estimate_uncertainty(c_hat_1, c_hat_2, kind: str | None = None) -> tuple[UncertaintyMap, UncertaintyMap]:
    """Per-cell uncertainty from two reward outputs.

    Probability outputs give the two directed KL divergences over the class
    axis; scalar outputs give |c1 - c2| for both.  Results are clamped at 0
    and stay differentiable in both inputs.
    """
    c1 = tn.as_tensor(c_hat_1)
    c2 = tn.as_tensor(c_hat_2)
    if c1.shape != c2.shape:
        raise tn.ShapeError("estimate_uncertainty", c1.shape, c2.shape)
    if kind is None:
        kind = "kl" if c1.shape[-1] > 1 else "l1"
    if kind == "kl":
        if c1.shape[-1] < 2:
            raise ValueError("KL uncertainty needs probability heads")
        p1 = tn.clamp(c1, PROB_FLOOR, 1.0)
        p2 = tn.clamp(c2, PROB_FLOOR, 1.0)
        lp1, lp2 = tn.log(p1), tn.log(p2)
        u1 = tn.sum(p1 * (lp1 - lp2), axes=-1)
        u2 = tn.sum(p2 * (lp2 - lp1), axes=-1)
        return UncertaintyMap(tn.clamp(u1, 0.0), "kl"), UncertaintyMap(tn.clamp(u2, 0.0), "kl")
    if kind == "l1":
        if c1.shape[-1] != 1:
            raise ValueError("l1 uncertainty needs scalar heads")
        u = tn.sum(tn.absolute(c1 - c2), axes=-1)
        return UncertaintyMap(u, "l1"), UncertaintyMap(u, "l1")
    raise ValueError(f"unknown uncertainty kind {kind!r}")


def rectified_loss(l_c, u, lam: float = 1.0, *, detach: bool = False) -> Tensor:
    """mean( l_c / exp(u) + lam * u ).

    With ``detach`` the weighting exp(-u) is treated as a constant while the
    ``lam * u`` penalty still carries gradient.
    """
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    l_c = tn.as_tensor(l_c)
    u = u.values if isinstance(u, UncertaintyMap) else tn.as_tensor(u)
    if l_c.shape != u.shape:
        raise tn.ShapeError("rectified_loss", l_c.shape, u.shape)
    weight = tn.exp(-(u.detach() if detach else u))
    per_cell = l_c * weight
    if lam:
        per_cell = per_cell + lam * u
    return tn.mean(per_cell)


def mu_gate(t: int, t_thre: int, mu0: float) -> float:
    if mu0 < 0:
        raise ValueError(f"mu0 must be non-negative, got {mu0}")
    return float(mu0) if t <= t_thre else 0.0


# ---------------------------------------------------------------- dual forward


@dataclass
class GenerationPair:
    t1: int
    t2: int | None
    eps1: Tensor
    eps2: Tensor | None
    z1: Tensor
    z2: Tensor | None
    eps_pred1: Tensor
    eps_pred2: Tensor | None = None
    z0hat1: Tensor | None = None
    z0hat2: Tensor | None = None
    chat1: Tensor | None = None
    chat2: Tensor | None = None

    @property
    def dual(self) -> bool:
        return self.t2 is not None


def dual_forward(schedule: df.NoiseSchedule, denoiser, z0, condition, label, t1: int,
                 t2: int | None, eps1: np.ndarray, eps2: np.ndarray | None = None) -> GenerationPair:
    """Noise ``z0`` at t1 (and t2) and predict the noise with ``denoiser``.

    Pass ``t2=None`` for the single-forward (diffusion-only) step.  Recovery
    and reward outputs are filled in later by :func:`total_loss`.
    """
    e1 = tn.as_tensor(eps1)
    z1 = df.add_noise(schedule, z0, t1, e1)
    p1 = denoiser(z1, t1, label, condition)
    if t2 is None:
        return GenerationPair(t1, None, e1, None, z1, None, p1)
    e2 = tn.as_tensor(eps2)
    z2 = df.add_noise(schedule, z0, t2, e2)
    p2 = denoiser(z2, t2, label, condition)
    return GenerationPair(t1, t2, e1, e2, z1, z2, p1, p2)


# ---------------------------------------------------------------- total objective


@dataclass
class LossReport:
    l_diffusion: float
    l_consistency_1: float
    l_consistency_2: float
    l_uncertainty_1: float
    l_uncertainty_2: float
    mu: float
    total: float
    mean_uncertainty: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def total_loss(pair: GenerationPair, c, reward, *, schedule: df.NoiseSchedule, mu: float,
               lam: float = 1.0, mode: str = "ctrl_u", detach_uncertainty: bool = False,
               consistency: str | None = None) -> tuple[LossReport, Tensor]:
    """Diffusion loss plus mu times the two rectified reward losses.

    ``mode`` is ``ctrl_u`` (estimated uncertainty), ``vanilla`` (U fixed at
    0) or ``none`` (reward branch never runs).  When ``mu`` is 0 the reward
    model is not evaluated at all, so the result and its gradients are exactly
    those of the diffusion-only loss.
    """
    if mode not in ("ctrl_u", "vanilla", "none"):
        raise ValueError(f"unknown mode {mode!r}")
    if not pair.dual:
        loss = df.mse(pair.eps_pred1, pair.eps1)
        v = loss.item()
        return LossReport(v, 0.0, 0.0, 0.0, 0.0, 0.0, v, 0.0), loss

    l_diff = df.diffusion_loss(pair.eps_pred1, pair.eps1, pair.eps_pred2, pair.eps2)
    if mu == 0.0 or mode == "none":
        v = l_diff.item()
        return LossReport(v, 0.0, 0.0, 0.0, 0.0, 0.0, v, 0.0), l_diff

    if reward.arch.head == "probability":
        consistency = consistency or "cross_entropy"
    else:
        consistency = consistency or "mse"
    c = tn.as_tensor(c)
    pair.z0hat1 = df.recover_z0(schedule, pair.z1, pair.t1, pair.eps_pred1)
    pair.z0hat2 = df.recover_z0(schedule, pair.z2, pair.t2, pair.eps_pred2)
    pair.chat1 = reward(pair.z0hat1)
    pair.chat2 = reward(pair.z0hat2)
    lc1 = consistency_loss(c, pair.chat1, consistency)
    lc2 = consistency_loss(c, pair.chat2, consistency)
    if mode == "ctrl_u":
        u1, u2 = estimate_uncertainty(pair.chat1, pair.chat2)
        u1v, u2v = u1.values, u2.values
    else:
        u1v = u2v = Tensor(np.zeros(lc1.shape))
    lu1 = rectified_loss(lc1, u1v, lam, detach=detach_uncertainty)
    lu2 = rectified_loss(lc2, u2v, lam, detach=detach_uncertainty)
    total = l_diff + mu * (lu1 + lu2)
    report = LossReport(
        l_diffusion=l_diff.item(),
        l_consistency_1=float(lc1.data.mean()),
        l_consistency_2=float(lc2.data.mean()),
        l_uncertainty_1=lu1.item(),
        l_uncertainty_2=lu2.item(),
        mu=float(mu),
        total=total.item(),
        mean_uncertainty=float((u1v.data.mean() + u2v.data.mean()) / 2),
    )
    return report, total
