"""Seeded synthetic image classification data."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from deskdp.errors import ParameterError


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # [n, C, H, W] float32
    labels: np.ndarray  # [n] int64

    def __len__(self):
        return len(self.labels)


def make_synthetic_dataset(seed: int, n: int, shape=(3, 8, 8), classes: int = 4, noise: float = 0.3) -> Dataset:
    """Each class is a Gaussian blob with its own position and channel colour,
    rendered into a small image with pixel noise. Identical seeds give identical bytes."""
    if n < 1:
        raise ParameterError(f"need at least one sample, got n={n}")
    if classes < 2:
        raise ParameterError(f"need at least two classes, got {classes}")
    c, h, w = shape
    rng = np.random.default_rng(seed)
    centers = rng.uniform(1.0, [h - 2.0, w - 2.0], size=(classes, 2))
    colors = rng.uniform(-1.0, 1.0, size=(classes, c))
    colors /= np.linalg.norm(colors, axis=1, keepdims=True)
    labels = rng.integers(0, classes, size=n)
    jitter = rng.normal(0.0, 0.5, size=(n, 2))
    yy, xx = np.mgrid[0:h, 0:w]
    cy = (centers[labels, 0] + jitter[:, 0])[:, None, None]
    cx = (centers[labels, 1] + jitter[:, 1])[:, None, None]
    blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 1.5 ** 2))
    images = 2.0 * colors[labels][:, :, None, None] * blob[:, None] + noise * rng.normal(size=(n, c, h, w))
    return Dataset(images.astype(np.float32), labels.astype(np.int64))


def batch_indices(seed: int, step: int, n: int, size: int) -> np.ndarray:
    """Global batch for ``step``; depends only on (seed, step), never on worker count."""
    rng = np.random.default_rng([seed, step])
    if size <= n:
        return rng.permutation(n)[:size]
    return rng.integers(0, n, size=size)
