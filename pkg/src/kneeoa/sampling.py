"""Inverse-class-frequency weighted sampling for imbalance mitigation.

Each sample carries the reciprocal of its class count, so the total sampling
mass per class is 1 and draws are expected uniform over the classes present.
Weights are left unnormalized; the draw normalizes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np


@dataclass
class SamplingWeights:
    per_class: dict[int, float]
    per_sample: np.ndarray

    def __post_init__(self) -> None:
        self.per_sample = np.asarray(self.per_sample, dtype=np.float64)
        if np.any(self.per_sample <= 0):
            raise ValueError("all per-sample weights must be > 0")


def inverse_frequency_weights(
    class_counts: Mapping[int, int],
    grades: Sequence[int],
) -> SamplingWeights:
    """Weight each class by 1/count; per-sample weights follow `grades`.

    Classes with zero count are allowed only if no sample carries them.
    """
    per_class: dict[int, float] = {}
    for g, count in class_counts.items():
        if count > 0:
            per_class[g] = 1.0 / count
    per_sample = np.empty(len(grades), dtype=np.float64)
    for i, g in enumerate(grades):
        if g not in per_class:
            raise ValueError(f"class {g} appears in samples but has count 0")
        per_sample[i] = per_class[g]
    return SamplingWeights(per_class=per_class, per_sample=per_sample)


def weighted_sample(
    weights: SamplingWeights, n_draws: int, seed: int
) -> np.ndarray:
    """Draw n_draws indices with replacement, proportional to per-sample weight."""
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    rng = np.random.default_rng(seed & 0xFFFFFFFFFFFFFFFF)
    p = weights.per_sample / weights.per_sample.sum()
    return rng.choice(len(p), size=n_draws, replace=True, p=p)
