"""Seeded Gaussian-blob classification data with anisotropic feature scales."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BlobSpec:
    n_classes: int = 3
    n_features: int = 16
    n_samples: int = 1000
    center_spread: float = 1.0
    noise: float = 2.0
    # per-feature scale runs geometrically from 1 to this value
    max_feature_scale: float = 1000.0
    # constant shift added to every feature (scaled like the feature itself)
    offset: float = 0.0
    val_fraction: float = 0.2


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray  # batch x features
    labels: np.ndarray  # int64 in [0, n_classes)
    n_classes: int

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("inputs and labels disagree on batch size")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("labels out of range")

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, idx) -> Dataset:
        return Dataset(self.inputs[idx], self.labels[idx], self.n_classes)


def feature_scales(spec: BlobSpec) -> np.ndarray:
    return np.geomspace(1.0, spec.max_feature_scale, spec.n_features)


def make_blobs(spec: BlobSpec = BlobSpec(), seed: int = 0) -> tuple[Dataset, Dataset]:
    """(train, validation) split of a blob mixture; balanced classes, seeded."""
    if spec.n_classes < 2 or spec.n_samples < 2 * spec.n_classes:
        raise ValueError("need at least two classes and two samples per class")
    if not 0.0 < spec.val_fraction < 1.0:
        raise ValueError("val_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    scales = feature_scales(spec)
    centers = rng.standard_normal((spec.n_classes, spec.n_features)) * spec.center_spread
    labels = np.arange(spec.n_samples) % spec.n_classes
    noise = rng.standard_normal((spec.n_samples, spec.n_features)) * spec.noise
    x = (centers[labels] + noise + spec.offset) * scales
    perm = rng.permutation(spec.n_samples)
    x, labels = x[perm], labels[perm].astype(np.int64)
    n_val = int(round(spec.val_fraction * spec.n_samples))
    full = Dataset(x, labels, spec.n_classes)
    return full.subset(slice(n_val, None)), full.subset(slice(0, n_val))
