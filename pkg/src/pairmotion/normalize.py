"""Per-channel standardization of the flat motion representation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ShapeMismatch

STD_FLOOR = 1e-6


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.maximum(np.asarray(self.std, dtype=np.float64), STD_FLOOR)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ShapeMismatch("mean and std must be matching 1-d arrays")

    @classmethod
    def identity(cls, width: int) -> "Normalizer":
        return cls(np.zeros(width), np.ones(width))

    @classmethod
    def fit(cls, arrays) -> "Normalizer":
        """Statistics over every frame of every ``(..., T, C)`` array given."""
        flat = np.concatenate([np.asarray(a, dtype=np.float64).reshape(-1, np.shape(a)[-1]) for a in arrays])
        return cls(flat.mean(axis=0), flat.std(axis=0))

    @property
    def width(self) -> int:
        return self.mean.shape[0]

    def _stats(self, x):
        if x.shape[-1] != self.width:
            raise ShapeMismatch(f"expected {self.width} channels, got {x.shape[-1]}")
        if isinstance(x, torch.Tensor):
            return torch.as_tensor(self.mean, dtype=x.dtype), torch.as_tensor(self.std, dtype=x.dtype)
        return self.mean, self.std

    def normalize(self, x):
        mean, std = self._stats(x)
        return (x - mean) / std

    def denormalize(self, x):
        mean, std = self._stats(x)
        return x * std + mean
