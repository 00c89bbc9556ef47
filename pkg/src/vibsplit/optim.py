"""Shared training machinery: seeding, optimizer, and learning-rate shape.

Every source of randomness in the package flows through numpy generators
seeded by `derive_seed`, so runs are reproducible across platforms without
touching torch's global RNG state.
"""

from __future__ import annotations

import hashlib
import math
from typing import Iterable

import numpy as np
import torch


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; message carries diagnostics."""


def derive_seed(*parts: int | str) -> int:
    """Map a tuple of parts to a stable 64-bit seed via SHA-256."""
    h = hashlib.sha256()
    for part in parts:
        h.update(str(part).encode())
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:8], "little")


def make_adamw(params: Iterable[torch.nn.Parameter], lr: float,
               weight_decay: float = 0.01) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)


def warmup_cosine(total_steps: int, warmup_ratio: float = 0.1):
    """Factor schedule: linear ramp to 1, then cosine decay to 0.

    Returned callable maps the 0-based step index to a multiplier for the
    base learning rate, suitable for torch's LambdaLR.
    """
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0.0 <= warmup_ratio < 1.0:
        raise ValueError("warmup_ratio must be in [0, 1)")
    warmup_steps = max(int(round(total_steps * warmup_ratio)), 1 if warmup_ratio > 0 else 0)

    def factor(step: int) -> float:
        if step < warmup_steps:
            return (step + 1) / warmup_steps
        if total_steps == warmup_steps:
            return 1.0
        progress = (step - warmup_steps) / (total_steps - warmup_steps)
        progress = min(progress, 1.0)
        return 0.5 * (1.0 + math.cos(math.pi * progress))

    return factor


def make_scheduler(optimizer: torch.optim.Optimizer, total_steps: int,
                   warmup_ratio: float = 0.1) -> torch.optim.lr_scheduler.LambdaLR:
    return torch.optim.lr_scheduler.LambdaLR(
        optimizer, warmup_cosine(total_steps, warmup_ratio)
    )


def clip_gradients(params: Iterable[torch.nn.Parameter], max_norm: float = 1.0) -> float:
    """Global-norm clipping; returns the pre-clip norm for diagnostics."""
    return float(torch.nn.utils.clip_grad_norm_(list(params), max_norm))


def check_finite(loss: torch.Tensor, context: str) -> None:
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss in {context}: {loss.item()!r}")


def shuffled_indices(rng: np.random.Generator, count: int) -> np.ndarray:
    order = np.arange(count)
    rng.shuffle(order)
    return order
