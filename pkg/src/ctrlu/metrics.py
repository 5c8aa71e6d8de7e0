"""Toy-scale evaluation metrics: mIoU, RMSE, SSIM and a Frechet distance."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import stream


@dataclass
class MetricReport:
    name: str
    value: float
    n: int
    per_class: dict[int, float] | None = field(default=None)


def argmax_classes(probs: np.ndarray) -> np.ndarray:
    """Class map from (..., K) probabilities; ties go to the lowest index."""
    return np.argmax(np.asarray(probs), axis=-1)


def miou(pred, gt, K: int) -> MetricReport:
    """Mean IoU over classes present in ``pred`` or ``gt``."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"miou: grid mismatch {pred.shape} vs {gt.shape}")
    for name, a in (("pred", pred), ("gt", gt)):
        if a.size and (a.min() < 0 or a.max() >= K):
            raise ValueError(f"miou: {name} labels outside 0..{K - 1}")
    p = pred.ravel().astype(np.int64)
    g = gt.ravel().astype(np.int64)
    conf = np.bincount(g * K + p, minlength=K * K).reshape(K, K)
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(0) + conf.sum(1) - inter
    present = union > 0
    per_class = {int(k): float(inter[k] / union[k]) for k in np.flatnonzero(present)}
    value = float(np.mean(list(per_class.values()))) if per_class else 1.0
    return MetricReport("miou", value, int(p.size), per_class)


def rmse(pred, gt) -> MetricReport:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"rmse: grid mismatch {pred.shape} vs {gt.shape}")
    return MetricReport("rmse", float(np.sqrt(np.mean((pred - gt) ** 2))), int(pred.size))


def _window_sums(x: np.ndarray, w: int) -> np.ndarray:
    """Sums over every w x w window of the two leading-after-batch axes."""
    c = np.cumsum(np.cumsum(x, axis=-2), axis=-1)
    c = np.pad(c, [(0, 0)] * (x.ndim - 2) + [(1, 0), (1, 0)])
    return c[..., w:, w:] - c[..., :-w, w:] - c[..., w:, :-w] + c[..., :-w, :-w]


def ssim(a, b, window: int = 7, constants: tuple[float, float] | None = None,
         data_range: float = 2.0) -> MetricReport:
    """Mean SSIM over all valid uniform windows.

    Accepts (H, W), (H, W, C) or (N, H, W, C); channels and images are
    averaged.  Default constants use ``data_range`` 2 for [-1, 1] images.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: grid mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None, :, :, None], b[None, :, :, None]
    elif a.ndim == 3:
        a, b = a[None], b[None]
    H, W = a.shape[1:3]
    if window < 1 or window % 2 == 0 or window > min(H, W):
        raise ValueError(f"ssim: window must be odd and <= {min(H, W)}, got {window}")
    c1, c2 = constants if constants is not None else ((0.01 * data_range) ** 2,
                                                       (0.03 * data_range) ** 2)
    # channels first so the window runs over the last two axes
    a = np.moveaxis(a, -1, 1)
    b = np.moveaxis(b, -1, 1)
    n = window * window
    mu_a = _window_sums(a, window) / n
    mu_b = _window_sums(b, window) / n
    var_a = _window_sums(a * a, window) / n - mu_a ** 2
    var_b = _window_sums(b * b, window) / n - mu_b ** 2
    cov = _window_sums(a * b, window) / n - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return MetricReport("ssim", float(s.mean()), int(s.size))


def _sqrt_psd(m: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    if vals.min() < -tol:
        raise ValueError(f"matrix is not positive semi-definite (eigenvalue {vals.min():.3e})")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(feats_a, feats_b) -> MetricReport:
    """Frechet distance between Gaussian fits of two feature sets."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    d = a.shape[1]
    if b.shape[1] != d:
        raise ValueError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    if d > 16:
        raise ValueError(f"feature dimension {d} exceeds 16")
    if len(a) <= d or len(b) <= d:
        raise ValueError(f"need more than {d} samples per set, got {len(a)} and {len(b)}")
    mu_a, mu_b = a.mean(0), b.mean(0)
    sa = np.atleast_2d(np.cov(a, rowvar=False))
    sb = np.atleast_2d(np.cov(b, rowvar=False))
    root_a = _sqrt_psd(sa)
    inner = root_a @ sb @ root_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    if vals.min() < -1e-8:
        raise ValueError(f"cross term is not positive semi-definite (eigenvalue {vals.min():.3e})")
    tr_cross = np.sqrt(np.clip(vals, 0.0, None)).sum()
    value = float(((mu_a - mu_b) ** 2).sum() + np.trace(sa) + np.trace(sb) - 2 * tr_cross)
    return MetricReport("frechet", max(value, 0.0), len(a) + len(b))


def toy_features(images: np.ndarray, dim: int = 8, seed: int = 0) -> np.ndarray:
    """Fixed random projection to ``dim`` plus per-channel mean and std."""
    x = np.asarray(images, dtype=np.float64)
    flat = x.reshape(len(x), -1)
    proj = stream(seed, "frechet-projection").standard_normal((flat.shape[1], dim))
    proj /= np.sqrt(flat.shape[1])
    per_channel = x.reshape(len(x), -1, x.shape[-1])
    return np.concatenate([flat @ proj, per_channel.mean(1), per_channel.std(1)], axis=1)


def spearman(x, y) -> float:
    from scipy.stats import spearmanr

    return float(spearmanr(x, y).statistic)


def reward_error_sweep(schedule, denoiser, reward, dataset, t_grid, seeds, *,
                       batch: int = 256) -> list[tuple[int, int, float]]:
    """Reward-model error on one-step recoveries of noised data.

    For each timestep the clean images are noised, recovered in a single step
    with ``denoiser`` (t=0 is the identity) and passed through ``reward``.
    Error is 1 - mIoU for probability heads and RMSE for scalar heads, computed
    against the true conditions.  Returns ``(t, seed, error)`` rows.
    """
    from . import diffusion as df
    from . import tensor as tn

    if len(t_grid) == 0:
        raise ValueError("empty timestep grid")
    prob = reward.arch.head == "probability"
    rows = []
    for seed in seeds:
        for t in t_grid:
            t = int(t)
            preds = []
            for i in range(0, len(dataset), batch):
                sl = slice(i, i + batch)
                x0 = dataset.images[sl]
                with tn.no_grad():
                    if t == 0:
                        x0_hat = tn.Tensor(x0)
                    else:
                        eps = stream(seed, "fig1-eps", t, i).standard_normal(x0.shape)
                        zt = df.add_noise(schedule, x0, t, eps)
                        eps_pred = denoiser(zt, t, dataset.labels[sl], dataset.condition_tensor(sl))
                        x0_hat = df.recover_z0(schedule, zt, t, eps_pred)
                    preds.append(reward(x0_hat).data)
            pred = np.concatenate(preds)
            if prob:
                err = 1.0 - miou(argmax_classes(pred), dataset.conditions, reward.arch.classes).value
            else:
                err = rmse(pred[..., 0], dataset.conditions).value
            rows.append((t, int(seed), float(err)))
    return rows
