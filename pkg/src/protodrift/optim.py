"""SGD with momentum and a one-cycle learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autograd import Tensor
from .errors import ContractError


@dataclass
class SgdConfig:
    """Per-stage optimizer settings."""

    max_lr: float = 0.005
    batch_size: int = 16
    epochs: int = 20
    momentum: float = 0.9

    def __post_init__(self):
        if self.max_lr <= 0:
            raise ContractError(f"max_lr must be positive, got {self.max_lr}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")


def sgd_step(
    params: Sequence[Tensor],
    grads: Sequence[Tensor | np.ndarray],
    lr: float,
    momentum_state: dict[int, np.ndarray],
    momentum: float = 0.9,
) -> None:
    """One in-place SGD update; frozen params are skipped untouched.

    momentum_state maps id(param) to its velocity buffer and is updated in
    place, so the caller keeps one dict per training run.
    """
    if len(params) != len(grads):
        raise ContractError(f"{len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        g_arr = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float32)
        if g_arr.shape != p.data.shape:
            raise ContractError(
                f"grad shape {g_arr.shape} does not match param shape {p.data.shape}"
            )
        if not p.requires_grad:
            continue
        buf = momentum_state.get(id(p))
        if buf is None:
            buf = np.zeros_like(p.data)
            momentum_state[id(p)] = buf
        buf *= np.float32(momentum)
        buf += g_arr
        p.data -= np.float32(lr) * buf


class SGD:
    """Stateful wrapper around :func:`sgd_step` for a fixed param list."""

    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9):
        self.params = list(params)
        self.momentum = momentum
        self.state: dict[int, np.ndarray] = {}

    def step(self, grads: Sequence[Tensor | np.ndarray], lr: float) -> None:
        sgd_step(self.params, grads, lr, self.state, self.momentum)


def one_cycle_lr(
    step: int,
    total_steps: int,
    max_lr: float,
    div: float = 25.0,
    final_div: float = 1000.0,
) -> float:
    """Piecewise-cosine one-cycle schedule.

    Ramps from max_lr/div up to max_lr over the first 30% of steps, then
    anneals down to max_lr/(div*final_div).
    """
    if not 0 <= step < total_steps:
        raise ContractError(f"step {step} out of range [0, {total_steps})")
    start_lr = max_lr / div
    if total_steps == 1:
        return start_lr
    peak = max(1, math.floor(0.3 * total_steps))
    if step <= peak:
        frac = step / peak
        return start_lr + (max_lr - start_lr) * (1.0 - math.cos(math.pi * frac)) / 2.0
    end_lr = max_lr / (div * final_div)
    span = total_steps - 1 - peak
    frac = (step - peak) / span if span > 0 else 1.0
    return end_lr + (max_lr - end_lr) * (1.0 + math.cos(math.pi * frac)) / 2.0
