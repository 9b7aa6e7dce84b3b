"""K-augmentation: pair each noise map with K differently shuffled image orders.

Shuffles are derangements by default (no index keeps its position), so noise i
is never composed with its own source image. An unconstrained shuffle is
available behind a flag for comparison runs.
"""

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
import torch

from .errors import ConfigError, DegenerateBatchError, DimensionError, EmptySourceError


def sample_derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform derangement of n elements via rejection of uniform permutations.

    Acceptance probability tends to 1/e, so this takes < 3 tries on average.
    """
    if n < 2:
        raise DegenerateBatchError(f"no derangement exists for n={n}")
    idx = np.arange(n)
    while True:
        p = rng.permutation(n)
        if not np.any(p == idx):
            return p


@dataclass
class AugmentedBatchSet:
    """K mini-batches sharing one noise tensor, images reordered per batch."""

    mini_batches: List[Tuple[torch.Tensor, torch.Tensor]]
    permutations: List[np.ndarray]


def k_augment(noise: torch.Tensor, images: torch.Tensor, k: int, rng_seed,
              derange: bool = True) -> AugmentedBatchSet:
    """Duplicate (noise, images) into k mini-batches with shuffled image order.

    The noise tensor is passed through untouched (same object in every pair),
    so gradients set up on it survive augmentation. Each permutation is drawn
    fresh from a generator seeded with rng_seed.
    """
    if noise.shape[0] != images.shape[0]:
        raise DimensionError(
            f"noise and images disagree on batch size: {noise.shape[0]} vs {images.shape[0]}")
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    n = images.shape[0]
    if n < 2:
        raise DegenerateBatchError(
            "batch of 1 cannot be paired with an unrelated image (x_r != x)")
    rng = np.random.default_rng(rng_seed)
    perms = []
    for _ in range(k):
        p = sample_derangement(n, rng) if derange else rng.permutation(n)
        perms.append(p)
    batches = [(noise, images[torch.as_tensor(p, dtype=torch.long)]) for p in perms]
    return AugmentedBatchSet(batches, perms)


def sample_unrelated(dataset, n: int, rng_seed) -> torch.Tensor:
    """Draw n images from a dataset handle, without replacement when it is big enough."""
    size = len(dataset)
    if size == 0:
        raise EmptySourceError("cannot sample from an empty dataset")
    rng = np.random.default_rng(rng_seed)
    replace = size < n
    idx = rng.choice(size, size=n, replace=replace)
    return dataset.load(idx.tolist())
