"""Experiment configuration."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"config field {field_name!r}: {message}")


@dataclass(frozen=True)
class TrainConfig:
    # data
    task: str = "mask"
    height: int = 16
    width: int = 16
    classes: int = 4
    channels: int = 3
    num_labels: int = 1
    n_samples: int = 2500
    fractions: tuple[float, ...] = (0.8, 0.1, 0.1)
    data_seed: int = 0
    texture_noise: float = 0.1
    # schedule
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    # reward fine-tuning
    dt: int = 1
    t_thre: int | None = None  # None -> round(0.4 * T)
    lam: float = 1.0
    mu0: float = 0.1
    detach_uncertainty: bool = False
    share_noise: bool = False
    # optimizer
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-2
    batch_size: int = 16
    pretrain_steps: int = 2000
    finetune_steps: int = 1000
    # denoiser
    hidden: int = 128
    depth: int = 2
    cond_dim: int = 4
    cell_hidden: int = 32
    # reward / evaluation models
    reward_patch: int = 1
    reward_hidden: int = 16
    reward_band: tuple[float, float] = (0.85, 0.97)
    reward_rmse_max: float = 0.045
    reward_max_epochs: int = 30
    reward_lr: float = 1e-2
    eval_patch: int = 3
    eval_hidden: int = 64
    eval_band: tuple[float, float] = (0.99, 1.0)
    eval_rmse_max: float = 0.025
    eval_max_epochs: int = 60
    # evaluation
    sample_steps: int = 20
    samples_per_condition: int = 1
    fd_features: int = 8
    fig1_points: int = 10
    seeds: tuple[int, ...] = (0, 1, 2)
    out_dir: str = "runs/default"

    @property
    def threshold(self) -> int:
        return int(round(0.4 * self.T)) if self.t_thre is None else int(self.t_thre)

    def validate(self) -> TrainConfig:
        if self.task not in ("mask", "scalar"):
            raise ConfigError("task", f"must be 'mask' or 'scalar', got {self.task!r}")
        if self.lam < 0:
            raise ConfigError("lam", "must be >= 0")
        if self.mu0 < 0:
            raise ConfigError("mu0", "must be >= 0")
        if self.T < 2:
            raise ConfigError("T", "must be >= 2")
        if not 1 <= self.threshold <= self.T:
            raise ConfigError("t_thre", f"must lie in [1, T={self.T}]")
        if not 0 <= self.dt < self.T:
            raise ConfigError("dt", f"must lie in [0, T={self.T})")
        fr = self.fractions
        if len(fr) != 3 or any(f <= 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError("fractions", f"need three positive values summing to 1, got {list(fr)}")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ConfigError("beta_start", "need 0 < beta_start <= beta_end < 1")
        if not 1 <= self.sample_steps <= self.T:
            raise ConfigError("sample_steps", f"must lie in [1, T={self.T}]")
        if not self.seeds:
            raise ConfigError("seeds", "need at least one seed")
        if self.classes < 2:
            raise ConfigError("classes", "need at least 2")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be positive")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        known = {f.name: f for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(key, "unknown key")
        kwargs = {}
        for key, value in data.items():
            if isinstance(value, list):
                value = tuple(value)
            kwargs[key] = value
        return cls(**kwargs).validate()

    @classmethod
    def load(cls, path) -> TrainConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def override(self, **changes) -> TrainConfig:
        return replace(self, **changes).validate()


def archive(config: TrainConfig, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    path = d / "config.json"
    path.write_text(config.to_json())
    return path


SWEEP_AXES = {"dt": "dt", "t_thre": "t_thre", "lambda": "lam", "mu0": "mu0"}
