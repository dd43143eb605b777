"""AdamW with decoupled weight decay, and the warmup + cosine LR schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError


@dataclass
class ScheduleConfig:
    total_steps: int
    warmup_steps: int
    lr_peak: float

    def __post_init__(self):
        if self.total_steps <= 0 or not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigurationError(
                f"invalid schedule: warmup {self.warmup_steps}, total {self.total_steps}"
            )
        if self.lr_peak <= 0:
            raise ConfigurationError("lr_peak must be > 0")


def cosine_warmup_lr(step, cfg: ScheduleConfig) -> float:
    """Linear ramp 0 -> lr_peak over warmup, then half-cosine decay to 0.

    Steps past total_steps clamp to the final value (0).
    """
    if step <= 0:
        return 0.0
    if step < cfg.warmup_steps:
        return cfg.lr_peak * step / cfg.warmup_steps
    if step >= cfg.total_steps:
        return 0.0
    frac = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptimizerState:
    """Per-parameter AdamW moments plus the shared hyperparameters."""

    step: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)
    lr_base: float = 1e-3
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr: float) -> OptimizerState:
    """One AdamW update, in place on `params` (name -> Tensor).

    Weight decay is decoupled: applied to the parameter directly, never mixed
    into the moment estimates.
    """
    if lr < 0:
        raise ConfigurationError(f"negative learning rate: {lr}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        g = g.grad if hasattr(g, "grad") and not isinstance(g, np.ndarray) else g
        g = np.asarray(g)
        if g.shape != p.data.shape:
            raise ConfigurationError(
                f"gradient shape {g.shape} does not match parameter '{name}' {p.data.shape}"
            )
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data, dtype=np.float64)
            v = np.zeros_like(p.data, dtype=np.float64)
        g64 = g.astype(np.float64)
        m = state.beta1 * m + (1.0 - state.beta1) * g64
        v = state.beta2 * v + (1.0 - state.beta2) * g64 * g64
        state.first_moment[name] = m
        state.second_moment[name] = v
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new = p.data.astype(np.float64) - lr * update - lr * state.weight_decay * p.data.astype(np.float64)
        p.data = new.astype(p.data.dtype)
    return state
