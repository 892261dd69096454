"""Datasets: CIFAR binary ingestion, a synthetic sparse-dictionary task,
Gaussian corruption and per-channel normalization."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor_ops import dict_synthesize

CIFAR_PIXELS = 3 * 32 * 32


class DataError(ValueError):
    """Malformed or inconsistent dataset input."""


@dataclass
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be (n, c, h, w), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def sample_shape(self):
        return self.images.shape[1:]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        if idx.size == 0:
            idx = idx.astype(np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], self.num_classes, dict(self.meta))


def load_cifar(path, num_classes: int = 10) -> LabeledDataset:
    """Read a CIFAR binary batch file.

    Records are 1 label byte (2 for the 100-class variant: coarse then fine;
    the fine label is used) followed by 3072 channel-major pixel bytes.
    """
    label_bytes = 2 if num_classes == 100 else 1
    record = label_bytes + CIFAR_PIXELS
    with open(path, "rb") as fh:
        raw = np.frombuffer(fh.read(), dtype=np.uint8)
    if raw.size % record:
        full = raw.size // record
        raise DataError(
            f"{path}: length {raw.size} is not a multiple of the {record}-byte record size; "
            f"partial record starts at byte offset {full * record}"
        )
    recs = raw.reshape(-1, record)
    labels = recs[:, label_bytes - 1].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        i = int(bad[0])
        raise DataError(
            f"{path}: label {labels[i]} at byte offset {i * record + label_bytes - 1} "
            f"outside [0, {num_classes})"
        )
    images = recs[:, label_bytes:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return LabeledDataset(images, labels, num_classes, {"source": os.fspath(path)})


@dataclass
class SynthSpec:
    """Generator settings for :func:`synth_dataset`."""

    channels: int = 3
    code_channels: int = 6
    k: int = 5
    h: int = 16
    w: int = 16
    density: float = 0.1
    amplitude: float = 0.5
    separation: float = 1.0


def synth_dataset(classes: int, per_class: int, dict_spec: Optional[SynthSpec] = None,
                  noise0: float = 0.0, seed: int = 0, return_codes: bool = False):
    """Class-conditional sparse convolutional images.

    Each class owns one random dictionary (blended with a dictionary shared
    by all classes when ``separation < 1``); an image is
    ``clip(0.5 + D_class * Z + noise0 * eps, 0, 1)`` with Z a sparse random
    code (Bernoulli support, Gaussian values). Class means are all close to
    0.5, so the label is carried by local structure, not intensity.
    """
    if classes < 2 or per_class < 1:
        raise DataError("synth_dataset: need classes >= 2 and per_class >= 1")
    spec = dict_spec or SynthSpec()
    rng = np.random.default_rng(seed)
    dicts = rng.standard_normal((classes, spec.channels, spec.code_channels, spec.k, spec.k))
    if spec.separation < 1.0:
        shared = rng.standard_normal(dicts.shape[1:])
        dicts = np.sqrt(1.0 - spec.separation ** 2) * shared + spec.separation * dicts
    dicts /= np.sqrt((dicts ** 2).sum(axis=(1, 3, 4), keepdims=True))
    shape = (per_class, spec.code_channels, spec.h, spec.w)
    images, labels, codes = [], [], []
    for c in range(classes):
        support = rng.random(shape) < spec.density
        z = np.where(support, rng.standard_normal(shape), 0.0) * spec.amplitude
        x = 0.5 + dict_synthesize(dicts[c], z)
        if noise0:
            x = x + noise0 * rng.standard_normal(x.shape)
        images.append(np.clip(x, 0.0, 1.0))
        labels.append(np.full(per_class, c))
        codes.append(z)
    ds = LabeledDataset(np.concatenate(images), np.concatenate(labels), classes,
                        {"source": "synthetic", "seed": seed})
    if return_codes:
        return ds, dicts, np.concatenate(codes)
    return ds


def train_test_split(ds: LabeledDataset, test_fraction: float, seed: int = 0):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ds))
    n_test = int(round(test_fraction * len(ds)))
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))


@dataclass
class CorruptionSpec:
    """Additive Gaussian noise in [0, 1] pixel space.

    Levels 1-4 map to sigma 0.1-0.4; level 5 extends the line to 0.5.
    """

    level: int = 1
    sigma: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if self.sigma is None:
            if not 1 <= self.level <= 5:
                raise DataError(f"corruption level must be in 1..5, got {self.level}")
            self.sigma = 0.1 * self.level
        if self.sigma < 0:
            raise DataError("corruption sigma must be >= 0")


def corrupt_gaussian(ds: LabeledDataset, spec: CorruptionSpec) -> LabeledDataset:
    if spec.sigma == 0:
        return ds.subset(np.arange(len(ds)))
    rng = np.random.default_rng(spec.seed)
    noisy = np.clip(ds.images + rng.normal(0.0, spec.sigma, ds.images.shape), 0.0, 1.0)
    meta = dict(ds.meta, corruption={"level": spec.level, "sigma": spec.sigma, "seed": spec.seed})
    return LabeledDataset(noisy, ds.labels.copy(), ds.num_classes, meta)


def channel_stats(ds: LabeledDataset):
    """Per-channel mean and (population) std of the images."""
    return ds.images.mean(axis=(0, 2, 3)), ds.images.std(axis=(0, 2, 3))


def normalize(ds: LabeledDataset, mean, std) -> LabeledDataset:
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if np.any(std <= 0):
        raise DataError("normalize: std must be > 0 in every channel")
    imgs = (ds.images - mean[None, :, None, None]) / std[None, :, None, None]
    return LabeledDataset(imgs, ds.labels.copy(), ds.num_classes, dict(ds.meta))


def denormalize(ds: LabeledDataset, mean, std) -> LabeledDataset:
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    imgs = ds.images * std[None, :, None, None] + mean[None, :, None, None]
    return LabeledDataset(imgs, ds.labels.copy(), ds.num_classes, dict(ds.meta))


def quantize(ds: LabeledDataset) -> np.ndarray:
    """Images as 8-bit pixel values."""
    return np.round(ds.images * 255.0).astype(np.uint8)


def save_dataset(path, ds: LabeledDataset):
    with open(path, "wb") as fh:
        np.savez(fh, images=ds.images, labels=ds.labels,
                 meta=np.array(json.dumps({"num_classes": ds.num_classes, **ds.meta}, sort_keys=True)))


def load_dataset(path) -> LabeledDataset:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        num_classes = meta.pop("num_classes")
        return LabeledDataset(data["images"], data["labels"], num_classes, meta)
