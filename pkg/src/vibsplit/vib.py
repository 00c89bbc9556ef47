"""Gaussian bottleneck building blocks.

A bottleneck encoder maps frame representations to a per-frame diagonal
Gaussian posterior. Sampling goes through the reparameterization trick so
gradients reach the posterior parameters; the information cost is the
closed-form KL divergence against a standard spherical Gaussian, annealed
by a linear beta schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn


@dataclass
class GaussianLatent:
    """Per-frame diagonal-Gaussian posterior over a d-dimensional latent.

    ``mean`` and ``std`` are [frames, d]; ``std`` is strictly positive.
    """

    mean: Tensor
    std: Tensor

    def __post_init__(self) -> None:
        if self.mean.shape != self.std.shape:
            raise ValueError(
                f"mean shape {tuple(self.mean.shape)} != std shape {tuple(self.std.shape)}"
            )
        if self.mean.ndim != 2:
            raise ValueError(f"expected [frames, d], got {tuple(self.mean.shape)}")
        if not bool((self.std > 0).all()):
            raise ValueError("std must be strictly positive elementwise")

    @property
    def frames(self) -> int:
        return self.mean.shape[0]

    @property
    def width(self) -> int:
        return self.mean.shape[1]


def init_affine(layer: nn.Linear, rng: np.random.Generator,
                scale: float | None = None) -> None:
    """Initialize a linear layer from a fan-in-scaled symmetric normal.

    Weights come from the supplied numpy generator so model construction is
    reproducible independent of torch's global RNG state. The default scale
    1/sqrt(fan_in) keeps activation magnitudes roughly constant through
    stacked layers. Biases start at zero; in particular a log-variance head
    then emits std == 1.
    """
    if scale is None:
        scale = 1.0 / math.sqrt(layer.weight.shape[1])
    with torch.no_grad():
        w = rng.standard_normal(tuple(layer.weight.shape)) * scale
        layer.weight.copy_(torch.from_numpy(w.astype(np.float32)))
        layer.bias.zero_()


class BottleneckEncoder(nn.Module):
    """Maps frame representations [T, D] to a diagonal-Gaussian latent [T, d].

    Shared trunk: two affine D->D layers, each followed by a GELU. Two affine
    heads read the same trunk output: one for the mean, one for the
    log-variance (exponentiated to a strictly positive std, no clipping).
    """

    def __init__(
        self,
        input_width: int,
        bottleneck_width: int,
        rng: np.random.Generator | None = None,
    ) -> None:
        super().__init__()
        if input_width < 1 or bottleneck_width < 1:
            raise ValueError("widths must be >= 1")
        self.input_width = input_width
        self.bottleneck_width = bottleneck_width
        self.shared1 = nn.Linear(input_width, input_width)
        self.shared2 = nn.Linear(input_width, input_width)
        self.head_mean = nn.Linear(input_width, bottleneck_width)
        self.head_logvar = nn.Linear(input_width, bottleneck_width)
        self.act = nn.GELU()
        if rng is not None:
            self.reset_parameters(rng)

    def reset_parameters(self, rng: np.random.Generator, scale: float | None = None) -> None:
        for layer in (self.shared1, self.shared2, self.head_mean, self.head_logvar):
            init_affine(layer, rng, scale)

    def forward(self, h: Tensor) -> GaussianLatent:
        if h.ndim != 2 or h.shape[1] != self.input_width:
            raise ValueError(
                f"expected [frames, {self.input_width}], got {tuple(h.shape)}"
            )
        if h.shape[0] < 1:
            raise ValueError("need at least one frame")
        trunk = self.act(self.shared2(self.act(self.shared1(h))))
        mean = self.head_mean(trunk)
        logvar = self.head_logvar(trunk)
        return GaussianLatent(mean=mean, std=torch.exp(0.5 * logvar))


def reparameterize(latent: GaussianLatent, eps: Tensor) -> Tensor:
    """Sample z = mean + std * eps.

    ``eps`` is treated as data: gradients flow to the posterior parameters
    only.
    """
    if eps.shape != latent.mean.shape:
        raise ValueError(
            f"eps shape {tuple(eps.shape)} != latent shape {tuple(latent.mean.shape)}"
        )
    return latent.mean + latent.std * eps.detach()


def inference_latent(latent: GaussianLatent) -> Tensor:
    """Deterministic latent used at evaluation time: the posterior mean."""
    return latent.mean


def gaussian_kl(latent: GaussianLatent) -> Tensor:
    """KL divergence from the posterior to the standard spherical Gaussian.

    Per frame: 0.5 * sum_j (mean_j^2 + std_j^2 - ln std_j^2 - 1), then
    averaged over frames so the beta coefficient keeps the same meaning
    regardless of utterance length. Nonnegative; zero iff mean=0, std=1.
    """
    if not bool((latent.std > 0).all()):
        raise ValueError("std must be strictly positive")
    var = latent.std * latent.std
    per_frame = 0.5 * (latent.mean * latent.mean + var - torch.log(var) - 1.0).sum(dim=1)
    return per_frame.mean()


@dataclass(frozen=True)
class BetaSchedule:
    """Linear ramp of the information-loss coefficient over an entire run."""

    beta_start: float = 0.1
    beta_end: float = 1.0
    total_steps: int = 1

    def __post_init__(self) -> None:
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        if self.beta_end < self.beta_start:
            raise ValueError("schedule must be nondecreasing (beta_end >= beta_start)")


def beta_at(step: int, schedule: BetaSchedule) -> float:
    """Linear interpolation between the schedule endpoints."""
    if step < 0 or step > schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    frac = step / schedule.total_steps
    return schedule.beta_start + (schedule.beta_end - schedule.beta_start) * frac
