"""Index samplers feeding the two BBN branches."""

from typing import Literal

import numpy as np

from core.errors import OverFilteringError, UsageError

SamplerMode = Literal["class_balanced", "uniform"]


class BranchSampler:
    """Draws row indices of a dataset view.

    ``class_balanced`` picks a class with probability 1/2 per draw and then a
    row of that class uniformly; ``uniform`` picks every row with probability
    1/n.
    """

    def __init__(self, mode: SamplerMode, labels: np.ndarray, rng: np.random.Generator):
        if mode not in ("class_balanced", "uniform"):
            raise UsageError(f"unknown sampler mode '{mode}'")
        labels = np.asarray(labels)
        if len(labels) == 0:
            raise UsageError("cannot sample from an empty dataset")
        self.mode = mode
        self.rng = rng
        self.n = len(labels)
        self.positives = np.flatnonzero(labels == 1)
        self.negatives = np.flatnonzero(labels == 0)
        if mode == "class_balanced" and (len(self.positives) == 0 or len(self.negatives) == 0):
            raise OverFilteringError("class-balanced sampling needs both classes")

    def draw(self, size: int) -> np.ndarray:
        if self.mode == "uniform":
            return self.rng.integers(self.n, size=size)
        take_pos = self.rng.random(size) < 0.5
        pos = self.positives[self.rng.integers(len(self.positives), size=size)]
        neg = self.negatives[self.rng.integers(len(self.negatives), size=size)]
        return np.where(take_pos, pos, neg)
