"""Experiment pipeline: data, pretraining, fine-tuning, evaluation, sweeps.

On-disk layout under ``out_dir``::

    config.json                      archived config of the last command
    data/                            manifest.json + train/val/test tensors
    seed_<s>/denoiser.ckpt           pretrained denoiser (float32)
    seed_<s>/reward.ckpt             training reward model (float32)
    seed_<s>/eval_reward.ckpt        evaluation reward model (float32)
    seed_<s>/denoiser_state.ckpt     resume state: params, Adam moments, step (float64)
    seed_<s>/pretrain_losses.csv
    seed_<s>/reward_accuracy.csv     validation quality of both reward models
    pretrain_accuracy.csv            the same rows for every seed
    seed_<s>/finetune_<mode>/        config.json, denoiser.ckpt, losses.csv
    metrics_<mode>.csv               evaluation summary over seeds
    fig1.csv, fig1_summary.csv, fig1_spearman.csv, fig1.svg
    sweep_<axis>/sweep.csv, sweep.svg, <axis>=<v>/seed_<s>/losses.csv
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from . import diffusion as df
from . import metrics
from . import synthdata
from . import tensor as tn
from .config import SWEEP_AXES, TrainConfig, archive
from .nets import Adam, Denoiser, DenoiserArch, RewardArch, RewardModel, pretrain_reward
from .rng import stream
from .svg import line_chart
from .uncertainty import LossReport, dual_forward, mu_gate, total_loss

log = logging.getLogger(__name__)

MODES = ("none", "vanilla", "ctrl_u")


class TrainingDivergence(RuntimeError):
    def __init__(self, step: int, last_report: LossReport | None):
        self.step = step
        self.last_report = last_report
        super().__init__(f"non-finite loss at step {step}; last finite report: {last_report}")


# ---------------------------------------------------------------- csv helpers


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.9g}"
    return str(v)


def csv_text(header: list[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    return buf.getvalue()


def write_csv(path, header: list[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(csv_text(header, rows))
    return path


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# ---------------------------------------------------------------- builders


def schedule_for(cfg: TrainConfig) -> df.NoiseSchedule:
    return df.make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)


def cond_channels(cfg: TrainConfig) -> int:
    return cfg.classes if cfg.task == "mask" else 1


def denoiser_arch(cfg: TrainConfig) -> DenoiserArch:
    return DenoiserArch(cfg.height, cfg.width, cfg.channels, cond_channels(cfg), cfg.T,
                        cfg.num_labels, cfg.hidden, cfg.depth, cfg.cond_dim, cfg.cell_hidden)


def reward_arch(cfg: TrainConfig, evaluation: bool = False) -> RewardArch:
    head = "probability" if cfg.task == "mask" else "scalar"
    patch = cfg.eval_patch if evaluation else cfg.reward_patch
    hidden = cfg.eval_hidden if evaluation else cfg.reward_hidden
    return RewardArch(cfg.height, cfg.width, cfg.channels, head, cfg.classes, patch, hidden)


def new_denoiser(cfg: TrainConfig, seed: int) -> Denoiser:
    return Denoiser(denoiser_arch(cfg), stream(seed, "init-denoiser"))


def seed_dir(cfg: TrainConfig, seed: int, out=None) -> Path:
    return Path(out or cfg.out_dir) / f"seed_{seed}"


def save_model(path, model) -> None:
    checkpoint.save(path, {k: p.data for k, p in model.params.items()}, dtype="float32")


def load_denoiser(cfg: TrainConfig, path) -> Denoiser:
    model = new_denoiser(cfg, 0)
    model.load_arrays(checkpoint.load(path))
    return model


def load_reward(cfg: TrainConfig, path, evaluation: bool = False) -> RewardModel:
    path = Path(path)
    if not path.exists():
        what = "evaluation" if evaluation else "training"
        raise FileNotFoundError(f"missing {what} reward model {path}; run `ctrlu pretrain` first")
    model = RewardModel(reward_arch(cfg, evaluation), stream(0, "init-reward"))
    model.load_arrays(checkpoint.load(path))
    return model.freeze()


# ---------------------------------------------------------------- data


def generate(cfg: TrainConfig) -> dict[str, synthdata.Dataset]:
    if cfg.task == "mask":
        pool = synthdata.gen_mask_task(cfg.n_samples, cfg.height, cfg.width, cfg.classes,
                                       cfg.data_seed, C=cfg.channels,
                                       texture_noise=cfg.texture_noise, num_labels=cfg.num_labels)
    else:
        pool = synthdata.gen_scalar_task(cfg.n_samples, cfg.height, cfg.width, cfg.data_seed,
                                         C=cfg.channels, texture_noise=cfg.texture_noise,
                                         num_labels=cfg.num_labels)
    parts = synthdata.split(pool, cfg.fractions, cfg.data_seed)
    return dict(zip(synthdata.SPLIT_NAMES, parts))


def cmd_gen_data(cfg: TrainConfig, out=None) -> Path:
    out = Path(out or cfg.out_dir)
    archive(cfg, out)
    splits = generate(cfg)
    synthdata.save_splits(out / "data", splits, {"fractions": list(cfg.fractions)})
    return out / "data"


def load_data(cfg: TrainConfig, out=None) -> dict[str, synthdata.Dataset]:
    data = synthdata.load_splits(Path(out or cfg.out_dir) / "data")
    task = next(iter(data.values())).kind
    if task != cfg.task:
        raise ValueError(f"dataset on disk is for task {task!r}, config says {cfg.task!r}")
    return data


# ---------------------------------------------------------------- denoiser pretraining


@dataclass
class PretrainState:
    model: Denoiser
    opt: Adam
    step: int = 0


def pretrain_state(cfg: TrainConfig, seed: int) -> PretrainState:
    model = new_denoiser(cfg, seed)
    opt = Adam(model.params, cfg.lr, (cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)
    return PretrainState(model, opt)


def save_state(path, state: PretrainState) -> None:
    arrays = {f"param/{k}": p.data for k, p in state.model.params.items()}
    arrays.update({f"opt/{k}": v for k, v in state.opt.state_arrays().items()})
    arrays["step"] = np.array([float(state.step)])
    checkpoint.save(path, arrays, dtype="float64")


def load_state(cfg: TrainConfig, path, seed: int) -> PretrainState:
    arrays = checkpoint.load(path)
    state = pretrain_state(cfg, seed)
    state.model.load_arrays({k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
    state.opt.load_state_arrays({k[4:]: v for k, v in arrays.items() if k.startswith("opt/")})
    state.step = int(arrays["step"][0])
    return state


def pretrain_steps(cfg: TrainConfig, state: PretrainState, train: synthdata.Dataset,
                   seed: int, until: int) -> list[tuple[int, float]]:
    """Diffusion-only training (per-sample timesteps) from ``state.step`` to ``until``."""
    schedule = schedule_for(cfg)
    rows = []
    n = len(train)
    while state.step < until:
        step = state.step + 1
        idx = stream(seed, "pretrain-batch", step).choice(n, cfg.batch_size, replace=False)
        ts = stream(seed, "pretrain-t", step).integers(1, cfg.T + 1, size=len(idx))
        z0 = train.images[idx]
        eps = stream(seed, "pretrain-eps", step).standard_normal(z0.shape)
        ab = schedule.alpha_bar[ts][:, None, None, None]
        zt = np.sqrt(ab) * z0 + np.sqrt(1 - ab) * eps
        pred = state.model(zt, ts, train.labels[idx], train.condition_tensor(idx))
        loss = df.mse(pred, eps)
        if not math.isfinite(loss.item()):
            raise TrainingDivergence(step, None)
        state.opt.zero_grad()
        loss.backward()
        state.opt.step()
        state.step = step
        rows.append((step, loss.item()))
    return rows


def train_reward_models(cfg: TrainConfig, data, seed: int) -> tuple[RewardModel, RewardModel, list]:
    prob = cfg.task == "mask"
    rows = []
    models = []
    for evaluation in (False, True):
        arch = reward_arch(cfg, evaluation)
        name = "eval_reward" if evaluation else "reward"
        model = RewardModel(arch, stream(seed, f"init-{name}"))
        if prob:
            band = cfg.eval_band if evaluation else cfg.reward_band
        else:
            band = (0.0, cfg.eval_rmse_max if evaluation else cfg.reward_rmse_max)
        model, report = pretrain_reward(
            model, data["train"], data["val"], band=band,
            max_epochs=cfg.eval_max_epochs if evaluation else cfg.reward_max_epochs,
            lr=cfg.reward_lr, seed=seed + (1000 if evaluation else 0),
        )
        rows.append((seed, name, report.metric, report.value, report.epochs, report.in_band))
        models.append(model)
    return models[0], models[1], rows


def cmd_pretrain(cfg: TrainConfig, out=None) -> list:
    out = Path(out or cfg.out_dir)
    archive(cfg, out)
    data = load_data(cfg, out)
    summary = []
    for seed in cfg.seeds:
        d = seed_dir(cfg, seed, out)
        state = pretrain_state(cfg, seed)
        rows = pretrain_steps(cfg, state, data["train"], seed, cfg.pretrain_steps)
        write_csv(d / "pretrain_losses.csv", ["step", "loss"], rows)
        save_state(d / "denoiser_state.ckpt", state)
        save_model(d / "denoiser.ckpt", state.model)
        reward, eval_reward, acc = train_reward_models(cfg, data, seed)
        save_model(d / "reward.ckpt", reward)
        save_model(d / "eval_reward.ckpt", eval_reward)
        write_csv(d / "reward_accuracy.csv",
                  ["seed", "model", "metric", "value", "epochs", "in_band"], acc)
        summary.extend(acc)
        log.info("seed %d pretrain loss %.4f -> %.4f", seed, rows[0][1], rows[-1][1])
    write_csv(out / "pretrain_accuracy.csv",
              ["seed", "model", "metric", "value", "epochs", "in_band"], summary)
    return summary


# ---------------------------------------------------------------- fine-tuning


def step_loss(cfg: TrainConfig, schedule: df.NoiseSchedule, denoiser: Denoiser, reward: RewardModel,
              z0: np.ndarray, cond: np.ndarray, labels, t1: int, eps1: np.ndarray,
              eps2: np.ndarray | None, mode: str) -> tuple[LossReport, tn.Tensor, int | None]:
    """One fine-tuning objective at timestep ``t1``; returns (report, loss, t2).

    Above the gate (or in mode ``none``) this is a single diffusion forward and
    ``eps2`` is ignored.
    """
    mu = 0.0 if mode == "none" else mu_gate(t1, cfg.threshold, cfg.mu0)
    t2 = min(t1 + cfg.dt, cfg.T) if mu > 0 else None
    if t2 is None:
        eps2 = None
    elif cfg.share_noise:
        eps2 = eps1
    elif eps2 is None:
        raise ValueError("dual forward needs eps2 unless share_noise is set")
    pair = dual_forward(schedule, denoiser, z0, cond, labels, t1, t2, eps1, eps2)
    report, loss = total_loss(pair, cond, reward, schedule=schedule, mu=mu, lam=cfg.lam,
                              mode=mode, detach_uncertainty=cfg.detach_uncertainty)
    return report, loss, t2


def finetune_run(cfg: TrainConfig, denoiser: Denoiser, reward: RewardModel,
                 train: synthdata.Dataset, seed: int, mode: str) -> list[tuple]:
    """Fine-tune ``denoiser`` in place; returns one CSV row per step.

    Batches, timesteps and noise depend only on (seed, step), so the three
    modes see identical data streams.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    schedule = schedule_for(cfg)
    opt = Adam(denoiser.params, cfg.lr, (cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)
    reward_hash = reward.param_hash()
    n = len(train)
    rows = []
    last = None
    for step in range(1, cfg.finetune_steps + 1):
        idx = stream(seed, "ft-batch", step).choice(n, cfg.batch_size, replace=False)
        t1 = int(stream(seed, "ft-t", step).integers(1, cfg.T + 1))
        z0 = train.images[idx]
        eps1 = stream(seed, "ft-eps1", step).standard_normal(z0.shape)
        eps2 = None
        if not cfg.share_noise:
            eps2 = stream(seed, "ft-eps2", step).standard_normal(z0.shape)
        report, loss, t2 = step_loss(cfg, schedule, denoiser, reward, z0, train.condition_tensor(idx),
                                     train.labels[idx], t1, eps1, eps2, mode)
        if not math.isfinite(report.total):
            raise TrainingDivergence(step, last)
        opt.zero_grad()
        loss.backward()
        opt.step()
        last = report
        rows.append((step, t1, -1 if t2 is None else t2, *report.as_dict().values()))
    if reward.param_hash() != reward_hash:
        raise RuntimeError("reward model parameters changed during fine-tuning")
    return rows


FINETUNE_HEADER = ["step", "t1", "t2", *LossReport.columns()]


def finetune_dir(cfg: TrainConfig, seed: int, mode: str, out=None) -> Path:
    return seed_dir(cfg, seed, out) / f"finetune_{mode}"


def cmd_finetune(cfg: TrainConfig, mode: str, out=None, seeds=None) -> list[Path]:
    out = Path(out or cfg.out_dir)
    archive(cfg, out)
    data = load_data(cfg, out)
    paths = []
    for seed in seeds or cfg.seeds:
        d = seed_dir(cfg, seed, out)
        if not (d / "denoiser.ckpt").exists():
            raise FileNotFoundError(f"no pretrained denoiser in {d}; run `ctrlu pretrain` first")
        denoiser = load_denoiser(cfg, d / "denoiser.ckpt")
        reward = load_reward(cfg, d / "reward.ckpt")
        rows = finetune_run(cfg, denoiser, reward, data["train"], seed, mode)
        fd = finetune_dir(cfg, seed, mode, out)
        archive(cfg, fd)
        write_csv(fd / "losses.csv", FINETUNE_HEADER, rows)
        save_model(fd / "denoiser.ckpt", denoiser)
        paths.append(fd)
    return paths


# ---------------------------------------------------------------- evaluation


def generate_samples(cfg: TrainConfig, denoiser, test: synthdata.Dataset, seed: int,
                     batch: int = 256) -> np.ndarray:
    """(N * samples_per_condition, H, W, C) images from the ancestral sampler."""
    schedule = schedule_for(cfg)
    out = []
    for rep in range(cfg.samples_per_condition):
        for i in range(0, len(test), batch):
            sl = slice(i, i + batch)
            out.append(df.sample(schedule, denoiser, test.condition_tensor(sl), cfg.sample_steps,
                                 stream(seed, "sampler", rep, i), label=test.labels[sl],
                                 shape=test.images[sl].shape))
    return np.concatenate(out)


def evaluate_images(cfg: TrainConfig, images: np.ndarray, test: synthdata.Dataset,
                    eval_model: RewardModel) -> dict[str, float]:
    reps = len(images) // len(test)
    conds = np.concatenate([test.conditions] * reps)
    with tn.no_grad():
        pred = np.concatenate([eval_model(images[i:i + 256]).data for i in range(0, len(images), 256)])
    result = {}
    if cfg.task == "mask":
        result["miou"] = metrics.miou(metrics.argmax_classes(pred), conds, cfg.classes).value
    else:
        result["rmse"] = metrics.rmse(pred[..., 0], conds).value
        window = min(7, cfg.height, cfg.width) | 1
        if window > min(cfg.height, cfg.width):
            window -= 2
        result["ssim"] = metrics.ssim(pred[..., 0][..., None], conds[..., None], window,
                                      data_range=1.0).value
    feats_gen = metrics.toy_features(images, cfg.fd_features)
    feats_real = metrics.toy_features(test.images, cfg.fd_features)
    result["frechet"] = metrics.frechet_distance(feats_gen, feats_real).value
    return result


def evaluate_checkpoint(cfg: TrainConfig, checkpoint_path, seed: int, out=None) -> dict[str, float]:
    out = Path(out or cfg.out_dir)
    data = load_data(cfg, out)
    eval_model = load_reward(cfg, seed_dir(cfg, seed, out) / "eval_reward.ckpt", evaluation=True)
    denoiser = load_denoiser(cfg, checkpoint_path)
    images = generate_samples(cfg, denoiser, data["test"], seed)
    return evaluate_images(cfg, images, data["test"], eval_model)


def checkpoint_for(cfg: TrainConfig, seed: int, mode: str | None, out=None) -> Path:
    if mode in (None, "pretrained"):
        return seed_dir(cfg, seed, out) / "denoiser.ckpt"
    return finetune_dir(cfg, seed, mode, out) / "denoiser.ckpt"


METRICS_HEADER = ["seed", "mode", "metric", "value"]


def cmd_evaluate(cfg: TrainConfig, mode: str | None = "ctrl_u", out=None, checkpoint_path=None,
                 seeds=None) -> Path:
    out = Path(out or cfg.out_dir)
    archive(cfg, out)
    rows = []
    label = mode or "pretrained"
    for seed in seeds or cfg.seeds:
        path = Path(checkpoint_path) if checkpoint_path else checkpoint_for(cfg, seed, mode, out)
        if not path.exists():
            hint = "ctrlu pretrain" if mode in (None, "pretrained") else f"ctrlu finetune --mode {mode}"
            raise FileNotFoundError(f"missing checkpoint {path}; run `{hint}` first")
        result = evaluate_checkpoint(cfg, path, seed, out)
        for name, value in result.items():
            rows.append((seed, label, name, value))
    return write_csv(out / f"metrics_{label}.csv", METRICS_HEADER, rows)


# ---------------------------------------------------------------- sweeps


SWEEP_HEADER = ["axis", "value", "seed", "status", "quality", "frechet", "mean_uncertainty", "error"]


def cmd_sweep(cfg: TrainConfig, axis: str, values, out=None, svg: bool = True,
              mode: str = "ctrl_u") -> Path:
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {sorted(SWEEP_AXES)}, got {axis!r}")
    out = Path(out or cfg.out_dir)
    archive(cfg, out)
    field_name = SWEEP_AXES[axis]
    cast = float if field_name in ("lam", "mu0") else int
    values = [cast(v) for v in values]
    for v in values:
        cfg.override(**{field_name: v})
    data = load_data(cfg, out)
    sweep_dir = out / f"sweep_{axis}"
    rows = []
    for v in values:
        leg_cfg = cfg.override(**{field_name: v})
        for seed in cfg.seeds:
            try:
                d = seed_dir(cfg, seed, out)
                denoiser = load_denoiser(cfg, d / "denoiser.ckpt")
                reward = load_reward(cfg, d / "reward.ckpt")
                eval_model = load_reward(cfg, d / "eval_reward.ckpt", evaluation=True)
                ft_rows = finetune_run(leg_cfg, denoiser, reward, data["train"], seed, mode)
                leg = sweep_dir / f"{axis}={fmt(v)}" / f"seed_{seed}"
                write_csv(leg / "losses.csv", FINETUNE_HEADER, ft_rows)
                images = generate_samples(leg_cfg, denoiser, data["test"], seed)
                res = evaluate_images(leg_cfg, images, data["test"], eval_model)
                gated = [r for r in ft_rows if r[FINETUNE_HEADER.index("mu")] > 0]
                mean_u = float(np.mean([r[FINETUNE_HEADER.index("mean_uncertainty")] for r in gated])) if gated else 0.0
                quality = res.get("miou", res.get("rmse"))
                rows.append((axis, v, seed, "ok", quality, res["frechet"], mean_u, ""))
            except Exception as e:  # noqa: BLE001 - failed legs are recorded, not fatal
                log.warning("sweep leg %s=%s seed %d failed: %s", axis, v, seed, e)
                rows.append((axis, v, seed, "failed", float("nan"), float("nan"), float("nan"),
                             f"{type(e).__name__}: {e}"))
    path = write_csv(sweep_dir / "sweep.csv", SWEEP_HEADER, rows)
    if svg:
        series = {}
        quality_name = "mIoU" if cfg.task == "mask" else "RMSE"
        for name, col in ((quality_name, 4), ("Frechet", 5), ("mean U", 6)):
            ys = [float(np.nanmean([r[col] for r in rows if r[1] == v])) for v in values]
            series[name] = (values, ys)
        (sweep_dir / "sweep.svg").write_text(
            line_chart(series, title=f"sweep over {axis}", xlabel=axis, ylabel="value"))
    return path


# ---------------------------------------------------------------- reward error vs timestep


def fig1_grid(cfg: TrainConfig) -> list[int]:
    return [int(round(x)) for x in np.linspace(0, 0.9 * cfg.T, cfg.fig1_points)]


def cmd_fig1(cfg: TrainConfig, out=None, svg: bool = True) -> tuple[Path, float]:
    """Reward error versus timestep; returns the CSV path and Spearman rho."""
    out = Path(out or cfg.out_dir)
    archive(cfg, out)
    data = load_data(cfg, out)
    schedule = schedule_for(cfg)
    grid = fig1_grid(cfg)
    rows = []
    for seed in cfg.seeds:
        d = seed_dir(cfg, seed, out)
        denoiser = load_denoiser(cfg, d / "denoiser.ckpt")
        reward = load_reward(cfg, d / "reward.ckpt")
        rows.extend(metrics.reward_error_sweep(schedule, denoiser, reward, data["val"], grid, [seed]))
    means = [float(np.mean([r[2] for r in rows if r[0] == t])) for t in grid]
    rho = metrics.spearman(grid, means)
    path = write_csv(out / "fig1.csv", ["t", "seed", "error"], rows)
    write_csv(out / "fig1_summary.csv", ["t", "mean_error"], list(zip(grid, means)))
    write_csv(out / "fig1_spearman.csv", ["spearman_rho"], [(rho,)])
    if svg:
        ylabel = "1 - mIoU" if cfg.task == "mask" else "RMSE"
        (out / "fig1.svg").write_text(line_chart({"reward error": (grid, means)},
                                                 title="reward error vs timestep",
                                                 xlabel="t", ylabel=ylabel))
    return path, rho
