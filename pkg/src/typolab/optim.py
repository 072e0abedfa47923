"""AdamW with decoupled weight decay and a linear warmup/decay schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import Tensor
from .errors import ContractViolation


@dataclass
class AdamWState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def linear_warmup_schedule(peak_lr: float, warmup_steps: int, total_steps: int) -> Callable[[int], float]:
    """Linear 0 -> peak over `warmup_steps` (peak exactly at the warmup
    step), then linear decay to 0 at `total_steps`."""
    if warmup_steps < 0 or total_steps <= 0:
        raise ContractViolation(f"bad schedule: warmup={warmup_steps}, total={total_steps}")

    def schedule(step: int) -> float:
        if warmup_steps > 0 and step <= warmup_steps:
            return peak_lr * step / warmup_steps
        if step >= total_steps:
            return 0.0
        return peak_lr * (total_steps - step) / max(1, total_steps - warmup_steps)

    return schedule


def adamw_step(
    params: dict[str, Tensor],
    state: AdamWState,
    lr_schedule: Callable[[int], float] | None = None,
) -> float:
    """One update over all params, reading gradients from `.grad`.

    Missing gradients count as zero. Returns the learning rate used.
    """
    state.step += 1
    lr = lr_schedule(state.step) if lr_schedule is not None else state.lr
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** state.step
    bias2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ContractViolation(f"gradient shape {g.shape} != param shape {p.data.shape} for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        if state.weight_decay:
            p.data = p.data - lr * (update + state.weight_decay * p.data)
        else:
            p.data = p.data - lr * update
    return lr


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None
