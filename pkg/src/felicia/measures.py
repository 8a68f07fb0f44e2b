"""Measure functions and latent priors for the generalized adversarial value.

A measure function maps discriminator outputs in [0, 1] to extended reals
and parameterizes the whole family of adversarial losses used here.  The
classic minimax objective is the ``log`` measure.  Custom measures must be
monotone nondecreasing on (0, 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

MEASURE_KINDS = ("log", "custom")
LATENT_DISTRIBUTIONS = ("standard_normal", "uniform_minus1_1")


@dataclass(frozen=True)
class MeasureFunction:
    """Monotone map from [0, 1] to the reals, clamped away from {0, 1}.

    Inputs outside ``[clamp_epsilon, 1 - clamp_epsilon]`` are clamped before
    the measure is applied, so the measure never returns NaN or +-inf for
    inputs in [0, 1].

    For ``kind="custom"`` supply ``fn``; it must accept and return torch
    tensors (plain floats are routed through a 0-d tensor) and must be
    monotone nondecreasing on (0, 1).
    """

    kind: str = "log"
    clamp_epsilon: float = 1e-7
    fn: Optional[Callable[[torch.Tensor], torch.Tensor]] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.kind not in MEASURE_KINDS:
            raise ValueError(f"unknown measure kind {self.kind!r}; expected one of {MEASURE_KINDS}")
        if not (0.0 < self.clamp_epsilon <= 1e-3):
            raise ValueError(f"clamp_epsilon must lie in (0, 1e-3], got {self.clamp_epsilon}")
        if self.kind == "custom" and self.fn is None:
            raise ValueError("custom measure requires fn")
        if self.kind != "custom" and self.fn is not None:
            raise ValueError("fn is only valid for kind='custom'")

    def __call__(self, p: torch.Tensor) -> torch.Tensor:
        """Apply the measure elementwise to a tensor of probabilities."""
        clamped = torch.clamp(p, self.clamp_epsilon, 1.0 - self.clamp_epsilon)
        if self.kind == "log":
            return torch.log(clamped)
        return self.fn(clamped)


def apply_measure(phi: MeasureFunction, p: float) -> float:
    """Evaluate ``phi`` at a scalar probability ``p`` in [0, 1].

    Raises ``ValueError`` on NaN input; values outside the clamp window are
    clamped first, so 0.0 and 1.0 are always finite.
    """
    p = float(p)
    if math.isnan(p):
        raise ValueError("measure input is NaN")
    out = phi(torch.tensor(p, dtype=torch.float64))
    return float(out)


LOG_MEASURE = MeasureFunction(kind="log")


@dataclass(frozen=True)
class LatentPrior:
    """Latent noise source feeding the generators."""

    dimension: int = 100
    distribution: str = "standard_normal"

    def __post_init__(self) -> None:
        if self.dimension <= 0:
            raise ValueError("latent dimension must be positive")
        if self.distribution not in LATENT_DISTRIBUTIONS:
            raise ValueError(
                f"unknown latent distribution {self.distribution!r}; expected one of {LATENT_DISTRIBUTIONS}"
            )

    def sample(
        self,
        n: int,
        generator: torch.Generator,
        dtype: torch.dtype = torch.float32,
    ) -> torch.Tensor:
        """Draw ``n`` latent vectors; bit-for-bit reproducible given the generator state."""
        if n < 0:
            raise ValueError("cannot sample a negative number of latents")
        if self.distribution == "standard_normal":
            return torch.randn(n, self.dimension, generator=generator, dtype=dtype)
        u = torch.rand(n, self.dimension, generator=generator, dtype=dtype)
        return u * 2.0 - 1.0

    def sample_numpy(self, n: int, seed: int, dtype: torch.dtype = torch.float32) -> np.ndarray:
        g = torch.Generator().manual_seed(int(seed))
        return self.sample(n, g, dtype=dtype).numpy()
