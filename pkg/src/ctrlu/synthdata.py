"""Seeded toy conditional-generation tasks.

``mask`` samples place K-1 rectangles or discs over a background class and
render each class with a fixed palette colour plus Gaussian texture noise.
``scalar`` samples use a smooth field (a few Gaussian bumps, rescaled to
[0, 1]) as the condition and encode it as image intensity plus noise.
Every sample draws from its own stream ``(seed, task, index)``, so generation
order does not matter.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .rng import stream

MAX_PLACEMENT_ATTEMPTS = 50


@dataclass(frozen=True)
class Condition:
    kind: str  # "mask" | "scalar"
    payload: np.ndarray  # (..., H, W) class ids or field values
    classes: int | None = None

    def __post_init__(self):
        if self.kind == "mask":
            if self.classes is None:
                raise ValueError("mask conditions need a class count")
            if self.payload.size and (self.payload.min() < 0 or self.payload.max() >= self.classes):
                raise ValueError("class id out of range")
        elif self.kind == "scalar":
            if self.payload.size and (self.payload.min() < 0 or self.payload.max() > 1):
                raise ValueError("scalar conditions must lie in [0, 1]")
        else:
            raise ValueError(f"unknown condition kind {self.kind!r}")

    @property
    def channels(self) -> int:
        return self.classes if self.kind == "mask" else 1

    def tensor(self) -> np.ndarray:
        """One-hot (..., H, W, K) for masks, (..., H, W, 1) for scalar fields."""
        return condition_channels(self.kind, self.payload, self.classes)


def condition_channels(kind: str, payload: np.ndarray, classes: int | None) -> np.ndarray:
    if kind == "mask":
        return np.eye(classes)[np.asarray(payload, dtype=np.int64)]
    return np.asarray(payload, dtype=np.float64)[..., None]


@dataclass
class Sample:
    image: np.ndarray
    condition: Condition
    label: int


@dataclass
class Dataset:
    kind: str
    images: np.ndarray  # (N, H, W, C) in [-1, 1]
    conditions: np.ndarray  # (N, H, W)
    labels: np.ndarray  # (N,)
    ids: np.ndarray  # (N,) index in the generated pool
    classes: int | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i], Condition(self.kind, self.conditions[i], self.classes),
                      int(self.labels[i]))

    @property
    def grid(self) -> tuple[int, int]:
        return self.images.shape[1:3]

    @property
    def cond_channels(self) -> int:
        return self.classes if self.kind == "mask" else 1

    def condition_tensor(self, idx=None) -> np.ndarray:
        payload = self.conditions if idx is None else self.conditions[idx]
        return condition_channels(self.kind, payload, self.classes)

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.kind, self.images[idx], self.conditions[idx], self.labels[idx],
                       self.ids[idx], self.classes, dict(self.meta))


def palette(classes: int, spread: float = 0.4) -> np.ndarray:
    """Class colours; up to 8 classes sit on cube corners ``spread`` apart."""
    if classes <= 8:
        corners = np.array(list(itertools.product((-0.5, 0.5), repeat=3)))
        order = [0, 7, 3, 5, 6, 1, 2, 4]
        return corners[order[:classes]] * spread
    return stream(0, "palette").uniform(-0.8, 0.8, size=(classes, 3))


def _place_shape(rng: np.random.Generator, H: int, W: int) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W]
    if rng.random() < 0.5:
        h = int(rng.integers(3, max(4, H // 2 + 1)))
        w = int(rng.integers(3, max(4, W // 2 + 1)))
        y0 = int(rng.integers(0, H - h + 1))
        x0 = int(rng.integers(0, W - w + 1))
        return (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
    r = rng.uniform(2.0, max(2.5, min(H, W) / 4))
    cy = rng.uniform(r, H - r)
    cx = rng.uniform(r, W - r)
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _mask_sample(i: int, H: int, W: int, K: int, seed: int, min_cells: int) -> np.ndarray:
    rng = stream(seed, "data-mask", i)
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        mask = np.zeros((H, W), dtype=np.int64)
        for k in range(1, K):
            mask[_place_shape(rng, H, W)] = k
        counts = np.bincount(mask.ravel(), minlength=K)
        if counts.min() >= min_cells:
            return mask
    raise RuntimeError(
        f"could not place {K - 1} visible shapes on a {H}x{W} grid after "
        f"{MAX_PLACEMENT_ATTEMPTS} attempts (sample {i}); use a larger grid or fewer classes"
    )


def _label_shift(label: int, num_labels: int) -> float:
    return 0.0 if num_labels <= 1 else 0.2 * (label / (num_labels - 1) - 0.5)


def gen_mask_task(n: int, H: int = 16, W: int = 16, K: int = 4, seed: int = 0, *, C: int = 3,
                  texture_noise: float = 0.1, num_labels: int = 1, spread: float = 0.4,
                  min_cells: int = 4) -> Dataset:
    if K < 2:
        raise ValueError("need at least 2 classes")
    if H < 8 or W < 8:
        raise ValueError("grid must be at least 8x8")
    if C != 3:
        raise ValueError("mask task renders RGB images (C=3)")
    colors = palette(K, spread)
    images = np.empty((n, H, W, C))
    masks = np.empty((n, H, W), dtype=np.int64)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        masks[i] = _mask_sample(i, H, W, K, seed, min_cells)
        rng = stream(seed, "data-mask-render", i)
        labels[i] = rng.integers(num_labels)
        img = colors[masks[i]] + _label_shift(int(labels[i]), num_labels)
        images[i] = np.clip(img + texture_noise * rng.standard_normal(img.shape), -1.0, 1.0)
    meta = dict(task="mask", n=n, H=H, W=W, K=K, C=C, seed=seed, texture_noise=texture_noise,
                num_labels=num_labels, spread=spread)
    return Dataset("mask", images, masks, labels, np.arange(n), K, meta)


def gen_scalar_task(n: int, H: int = 16, W: int = 16, seed: int = 0, *, C: int = 3,
                    texture_noise: float = 0.1, num_labels: int = 1) -> Dataset:
    if H < 8 or W < 8:
        raise ValueError("grid must be at least 8x8")
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    images = np.empty((n, H, W, C))
    fields = np.empty((n, H, W))
    labels = np.empty(n, dtype=np.int64)
    tint = np.linspace(0.7, 0.9, C)
    for i in range(n):
        rng = stream(seed, "data-scalar", i)
        f = np.zeros((H, W))
        for _ in range(int(rng.integers(2, 5))):
            cy, cx = rng.uniform(0, H), rng.uniform(0, W)
            s = rng.uniform(min(H, W) / 6, min(H, W) / 3)
            f += rng.uniform(0.5, 1.0) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        f = (f - f.min()) / (f.max() - f.min())
        fields[i] = f
        labels[i] = rng.integers(num_labels)
        img = (2 * f - 1)[..., None] * tint + _label_shift(int(labels[i]), num_labels)
        images[i] = np.clip(img + texture_noise * rng.standard_normal(img.shape), -1.0, 1.0)
    meta = dict(task="scalar", n=n, H=H, W=W, C=C, seed=seed, texture_noise=texture_noise,
                num_labels=num_labels)
    return Dataset("scalar", images, fields, labels, np.arange(n), None, meta)


def split(dataset: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[Dataset, ...]:
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.ndim != 1 or len(fr) == 0 or np.any(fr <= 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError(f"fractions must be positive and sum to 1, got {list(fractions)}")
    n = len(dataset)
    order = stream(seed, "split").permutation(n)
    bounds = np.round(np.concatenate([[0.0], np.cumsum(fr)]) * n).astype(int)
    bounds[-1] = n
    return tuple(dataset.subset(np.sort(order[lo:hi])) for lo, hi in zip(bounds[:-1], bounds[1:]))


SPLIT_NAMES = ("train", "val", "test")


def save_splits(directory, splits: dict[str, Dataset], extra: dict | None = None) -> None:
    """Write one tensor file per split plus ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    first = next(iter(splits.values()))
    manifest = {
        "task": first.kind,
        "grid": list(first.grid),
        "classes": first.classes,
        "meta": first.meta,
        "splits": {name: [int(i) for i in ds.ids] for name, ds in splits.items()},
    }
    if extra:
        manifest.update(extra)
    for name, ds in splits.items():
        checkpoint.save(d / f"{name}.bin", {
            "images": ds.images,
            "conditions": ds.conditions,
            "labels": ds.labels,
            "ids": ds.ids,
        }, dtype="float64")
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_splits(directory) -> dict[str, Dataset]:
    d = Path(directory)
    manifest_path = d / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset manifest in {d}; run gen-data first")
    manifest = json.loads(manifest_path.read_text())
    out = {}
    for name in manifest["splits"]:
        a = checkpoint.load(d / f"{name}.bin")
        conds = a["conditions"]
        if manifest["task"] == "mask":
            conds = conds.astype(np.int64)
        out[name] = Dataset(manifest["task"], a["images"], conds, a["labels"].astype(np.int64),
                            a["ids"].astype(np.int64), manifest["classes"], manifest["meta"])
    return out
