"""Sampling decision container shared by the sampler, baselines, and the
offloading optimizer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class SamplingDecision:
    """Binary participation vector with its budget."""

    mask: np.ndarray  # bool, shape (N,)
    budget: int

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)

    @classmethod
    def from_ids(cls, ids, n_devices: int, budget: int | None = None) -> "SamplingDecision":
        mask = np.zeros(n_devices, dtype=bool)
        mask[list(ids)] = True
        return cls(mask=mask, budget=len(ids) if budget is None else budget)

    @property
    def ids(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.mask)]

    @property
    def size(self) -> int:
        return int(self.mask.sum())
