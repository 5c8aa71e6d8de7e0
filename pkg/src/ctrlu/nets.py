"""Toy conditional denoiser, frozen reward models, and the Adam optimizer."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tn
from .tensor import Tensor

log = logging.getLogger(__name__)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    y = tn.matmul(x, w)
    return y + tn.broadcast_to(b, y.shape)


def _he(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    return tn.parameter(rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in))


def _as_batch_index(x, batch: int) -> np.ndarray:
    idx = np.asarray(x, dtype=np.int64)
    return np.full(batch, int(idx)) if idx.ndim == 0 else idx


class Module:
    params: dict[str, Tensor]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def zero_grad(self) -> None:
        tn.zero_grad(self.parameters())

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in self.params.items():
            a = np.asarray(arrays[name], dtype=np.float64)
            if a.shape != p.shape:
                raise tn.ShapeError(f"load {name}", p.shape, a.shape)
            p.data = a.copy()

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------- denoiser


@dataclass(frozen=True)
class DenoiserArch:
    height: int
    width: int
    channels: int = 3
    cond_channels: int = 4
    T: int = 100
    num_labels: int = 1
    hidden: int = 128
    depth: int = 2
    cond_dim: int = 4
    cell_hidden: int = 32


class Denoiser(Module):
    """Noise predictor eps(z_t, t, label, condition).

    A global MLP sees the flattened latent together with a per-cell linear
    embedding of the condition; learned timestep and label embeddings are
    added to its first hidden layer.  A small per-cell residual branch over
    the latent channels handles pixel-level detail the bottleneck cannot pass.
    Both output layers start at zero, so an untrained model predicts zero noise.
    """

    def __init__(self, arch: DenoiserArch, rng: np.random.Generator):
        self.arch = arch
        a = arch
        cells = a.height * a.width
        d_in = cells * (a.channels + a.cond_dim)
        p: dict[str, Tensor] = {
            "cond_w": _he(rng, a.cond_channels, a.cond_dim),
            "cond_b": tn.parameter(np.zeros(a.cond_dim)),
            "time_emb": tn.parameter(rng.standard_normal((a.T + 1, a.hidden)) * 0.1),
            "label_emb": tn.parameter(rng.standard_normal((a.num_labels, a.hidden)) * 0.1),
        }
        width = d_in
        for i in range(a.depth):
            p[f"w{i}"] = _he(rng, width, a.hidden)
            p[f"b{i}"] = tn.parameter(np.zeros(a.hidden))
            width = a.hidden
        p["w_out"] = tn.parameter(np.zeros((a.hidden, cells * a.channels)))
        p["b_out"] = tn.parameter(np.zeros(cells * a.channels))
        p["cell_w0"] = _he(rng, a.channels, a.cell_hidden)
        p["cell_b0"] = tn.parameter(np.zeros(a.cell_hidden))
        p["cell_time"] = tn.parameter(rng.standard_normal((a.T + 1, a.cell_hidden)) * 0.1)
        p["cell_w_out"] = tn.parameter(np.zeros((a.cell_hidden, a.channels)))
        p["cell_b_out"] = tn.parameter(np.zeros(a.channels))
        self.params = p

    @property
    def channels(self) -> int:
        return self.arch.channels

    def __call__(self, zt, t, label, condition) -> Tensor:
        return denoise(self, zt, t, label, condition)


def denoise(model: Denoiser, zt, t, label, condition) -> Tensor:
    """Predicted noise with the same shape as ``zt`` (B, H, W, C).

    ``t`` and ``label`` are ints or per-sample integer arrays;
    ``condition`` is (B, H, W, cond_channels).
    """
    a = model.arch
    p = model.params
    zt = tn.as_tensor(zt)
    cond = tn.as_tensor(condition)
    grid = (a.height, a.width)
    if zt.ndim != 4 or zt.shape[1:] != grid + (a.channels,):
        raise tn.ShapeError("denoise", zt.shape, (None, *grid, a.channels), "latent grid")
    if cond.shape != zt.shape[:3] + (a.cond_channels,):
        raise tn.ShapeError("denoise", zt.shape, cond.shape, "condition grid must match latent")
    B = zt.shape[0]
    cells = a.height * a.width
    ts = _as_batch_index(t, B)
    if ts.min() < 1 or ts.max() > a.T:
        raise ValueError(f"timestep outside [1, {a.T}]")
    labels = _as_batch_index(label, B)

    c = linear(tn.reshape(cond, (B * cells, a.cond_channels)), p["cond_w"], p["cond_b"])
    x = tn.concat([tn.reshape(zt, (B, cells * a.channels)), tn.reshape(c, (B, cells * a.cond_dim))], axis=1)
    h = linear(x, p["w0"], p["b0"])
    h = h + tn.take(p["time_emb"], ts, axis=0) + tn.take(p["label_emb"], labels, axis=0)
    h = tn.relu(h)
    for i in range(1, a.depth):
        h = tn.relu(linear(h, p[f"w{i}"], p[f"b{i}"]))
    out = linear(h, p["w_out"], p["b_out"])

    zc = tn.reshape(zt, (B * cells, a.channels))
    tc = tn.reshape(tn.take(p["cell_time"], ts, axis=0), (B, 1, a.cell_hidden))
    tc = tn.reshape(tn.broadcast_to(tc, (B, cells, a.cell_hidden)), (B * cells, a.cell_hidden))
    hc = tn.relu(linear(zc, p["cell_w0"], p["cell_b0"]) + tc)
    oc = linear(hc, p["cell_w_out"], p["cell_b_out"])

    return tn.reshape(out, zt.shape) + tn.reshape(oc, zt.shape)


# ---------------------------------------------------------------- reward model


@dataclass(frozen=True)
class RewardArch:
    height: int
    width: int
    channels: int = 3
    head: str = "probability"  # or "scalar"
    classes: int = 4
    patch: int = 1
    hidden: int = 16

    def __post_init__(self):
        if self.head not in ("probability", "scalar"):
            raise ValueError(f"unknown head kind {self.head!r}")
        if self.patch < 1 or self.patch % 2 == 0:
            raise ValueError("patch must be a positive odd integer")

    @property
    def out_channels(self) -> int:
        return self.classes if self.head == "probability" else 1


def patch_indices(height: int, width: int, patch: int) -> np.ndarray:
    """(H*W, patch*patch) flat neighbour indices with edge replication."""
    r = patch // 2
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    offs = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]
    idx = [
        np.clip(rows + dy, 0, height - 1) * width + np.clip(cols + dx, 0, width - 1)
        for dy, dx in offs
    ]
    return np.stack([i.reshape(-1) for i in idx], axis=1)


class RewardModel(Module):
    """Per-cell condition extractor over a ``patch`` x ``patch`` neighbourhood."""

    def __init__(self, arch: RewardArch, rng: np.random.Generator):
        self.arch = arch
        a = arch
        d_in = a.patch * a.patch * a.channels
        p = {}
        if a.hidden:
            p["w0"] = _he(rng, d_in, a.hidden)
            p["b0"] = tn.parameter(np.zeros(a.hidden))
            d_in = a.hidden
        p["w_out"] = tn.parameter(rng.standard_normal((d_in, a.out_channels)) * np.sqrt(1.0 / d_in))
        p["b_out"] = tn.parameter(np.zeros(a.out_channels))
        self.params = p
        self._idx = patch_indices(a.height, a.width, a.patch)
        self.frozen = False

    def freeze(self) -> RewardModel:
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None
        self.frozen = True
        return self

    def unfreeze(self) -> RewardModel:
        for t in self.params.values():
            t.requires_grad = True
        self.frozen = False
        return self

    def __call__(self, x0_hat) -> Tensor:
        return reward_forward(self, x0_hat)


def reward_forward(model: RewardModel, x0_hat) -> Tensor:
    """Extracted condition: (B, H, W, K) probabilities or (B, H, W, 1) values."""
    a = model.arch
    x = tn.as_tensor(x0_hat)
    if x.ndim != 4 or x.shape[1:] != (a.height, a.width, a.channels):
        raise tn.ShapeError("reward_forward", x.shape, (None, a.height, a.width, a.channels))
    B = x.shape[0]
    cells = a.height * a.width
    flat = tn.reshape(x, (B, cells, a.channels))
    if a.patch > 1:
        cols = tn.take(flat, model._idx, axis=1)
        feats = tn.reshape(cols, (B * cells, a.patch * a.patch * a.channels))
    else:
        feats = tn.reshape(flat, (B * cells, a.channels))
    h = feats
    if a.hidden:
        h = tn.relu(linear(h, model.params["w0"], model.params["b0"]))
    out = tn.reshape(linear(h, model.params["w_out"], model.params["b_out"]),
                     (B, a.height, a.width, a.out_channels))
    if a.head == "probability":
        return tn.softmax(out, axis=-1)
    return out


# ---------------------------------------------------------------- optimizer


class Adam:
    """Adam with decoupled weight decay."""

    def __init__(self, params: dict[str, Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros(p.shape) for k, p in params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in params.items()}

    def zero_grad(self) -> None:
        tn.zero_grad(self.params.values())

    def step(self) -> None:
        self.step_count += 1
        c1 = 1.0 - self.b1 ** self.step_count
        c2 = 1.0 - self.b2 ** self.step_count
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - self.lr * update

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"step": np.array([float(self.step_count)])}
        for k in self.params:
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.step_count = int(arrays["step"][0])
        for k in self.params:
            self.m[k] = np.array(arrays[f"m/{k}"], dtype=np.float64)
            self.v[k] = np.array(arrays[f"v/{k}"], dtype=np.float64)


# ---------------------------------------------------------------- reward pretraining


class RewardTrainingError(RuntimeError):
    pass


@dataclass
class RewardReport:
    metric: str
    value: float
    epochs: int
    band: tuple[float, float]
    in_band: bool

    def as_dict(self) -> dict:
        return asdict(self)


def _reward_targets(model: RewardModel, conditions: np.ndarray) -> np.ndarray:
    if model.arch.head == "probability":
        return np.eye(model.arch.classes)[conditions.astype(np.int64)]
    return conditions[..., None].astype(np.float64)


def evaluate_reward(model: RewardModel, images: np.ndarray, conditions: np.ndarray,
                    batch: int = 256) -> float:
    """Clean-data quality: mIoU for probability heads, RMSE for scalar heads."""
    from . import metrics

    preds = []
    with tn.no_grad():
        for i in range(0, len(images), batch):
            preds.append(reward_forward(model, images[i:i + batch]).data)
    pred = np.concatenate(preds)
    if model.arch.head == "probability":
        return metrics.miou(metrics.argmax_classes(pred), conditions, model.arch.classes).value
    return metrics.rmse(pred[..., 0], conditions).value


def pretrain_reward(
    model: RewardModel,
    train,
    val,
    *,
    band: tuple[float, float],
    max_epochs: int,
    batch_size: int = 32,
    lr: float = 1e-2,
    seed: int = 0,
) -> tuple[RewardModel, RewardReport]:
    """Fit ``model`` on clean (image, condition) pairs until ``band`` is reached.

    For probability heads the band bounds validation mIoU from below
    (training stops at the first epoch that reaches ``band[0]``); for scalar
    heads ``band[1]`` is the largest acceptable validation RMSE.
    Raises :class:`RewardTrainingError` if the band is not reached within
    ``max_epochs``.
    """
    from .rng import stream

    if len(train) == 0 or len(val) == 0:
        raise ValueError("reward pretraining needs non-empty train and validation sets")
    model.unfreeze()
    opt = Adam(model.params, lr=lr)
    prob = model.arch.head == "probability"
    targets = _reward_targets(model, train.conditions)
    metric = "miou" if prob else "rmse"
    value = float("nan")
    for epoch in range(1, max_epochs + 1):
        order = stream(seed, "reward-epoch", epoch).permutation(len(train))
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            out = reward_forward(model, train.images[idx])
            if prob:
                p = tn.clamp(out, tn.PROB_FLOOR, 1.0)
                loss = -tn.mean(tn.sum(tn.log(p) * targets[idx], axes=-1))
            else:
                loss = tn.mean(tn.square(out - targets[idx]))
            opt.zero_grad()
            loss.backward()
            opt.step()
        value = evaluate_reward(model, val.images, val.conditions)
        ok = value >= band[0] if prob else value <= band[1]
        log.debug("reward epoch %d %s=%.4f", epoch, metric, value)
        if ok:
            in_band = band[0] <= value <= band[1] if prob else True
            model.freeze()
            return model, RewardReport(metric, value, epoch, tuple(band), in_band)
    model.freeze()
    raise RewardTrainingError(
        f"reward model reached {metric}={value:.4f} after {max_epochs} epochs, outside "
        f"band {tuple(band)}; increase max_epochs or hidden width, or widen the band"
    )
