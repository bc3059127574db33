"""Containers for batched sequences and per-step Gaussian predictions."""

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import value_of


@dataclass
class SeriesBatch:
    """A batch of equal-length multichannel sequences.

    ``values`` is (batch, length, channels). ``mask`` marks observed entries
    with 1.0 and missing ones with 0.0; None means fully observed.
    """

    values: np.ndarray
    mask: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 3:
            raise ValueError(f"values must be (batch, length, channels), got {self.values.shape}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=float)
            if self.mask.shape != self.values.shape:
                raise ValueError("mask shape must match values")

    @property
    def batch(self):
        return self.values.shape[0]

    @property
    def length(self):
        return self.values.shape[1]

    @property
    def channels(self):
        return self.values.shape[2]


@dataclass
class GaussianSeq:
    """Per-step diagonal Gaussian over a sequence; fields may be tape Vars."""

    mu: object
    sigma: object

    def reparam(self, eps):
        """Differentiable sample mu + sigma * eps for fixed noise ``eps``."""
        return nm.add(self.mu, nm.mul(self.sigma, eps))

    def sample(self, rng):
        """Plain-array draw (no tape)."""
        mu = value_of(self.mu)
        sigma = value_of(self.sigma)
        return mu + sigma * rng.standard_normal(mu.shape)
