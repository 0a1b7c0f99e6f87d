"""AdamW with decoupled weight decay and a one-cycle cosine learning-rate
schedule.

The schedule endpoints are pinned exactly: step 0 yields max_lr divided by
the initial divisor, the warmup end yields max_lr itself, and the final
step yields max_lr divided by the final divisor, with no floating-point
drift from the interpolation formulas.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class OneCycleConfig:
    warmup_fraction: float = 0.05
    initial_divisor: float = 10.0
    final_divisor: float = 1000.0

    def __post_init__(self):
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if self.initial_divisor <= 1.0 or self.final_divisor <= 1.0:
            raise ValueError("divisors must exceed 1")


@dataclass(frozen=True)
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ValueError("betas must lie in [0, 1)")
        if self.epsilon <= 0 or self.weight_decay < 0:
            raise ValueError("epsilon must be positive, weight_decay non-negative")


def onecycle_lr(step: int, total_steps: int, max_lr: float,
                cfg: OneCycleConfig = OneCycleConfig()) -> float:
    """Cosine rise to max_lr over the warmup fraction, cosine descent after."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    last = total_steps - 1
    if last == 0:
        return max_lr
    peak = max(1, round(cfg.warmup_fraction * last))
    peak = min(peak, last)
    if step == peak:
        return max_lr
    if step == last:
        return max_lr / cfg.final_divisor
    low = max_lr / cfg.initial_divisor
    if step < peak:
        t = step / peak
        return low + (max_lr - low) * 0.5 * (1.0 - math.cos(math.pi * t))
    floor = max_lr / cfg.final_divisor
    t = (step - peak) / (last - peak)
    return floor + (max_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * t))


@dataclass
class AdamWState:
    """Per-parameter moment estimates plus the shared step counter."""

    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict, grads: dict, state: AdamWState, lr: float,
               cfg: AdamWConfig = AdamWConfig()) -> tuple[dict, AdamWState]:
    """One decoupled-weight-decay update; returns fresh params and state.

    Each tensor updates independently, so the result does not depend on
    dict iteration order. Missing gradients are treated as zero (the
    parameter still decays).
    """
    t = state.step + 1
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    new_params = {}
    new_state = AdamWState(step=t)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name!r}")
        m = state.exp_avg.get(name)
        v = state.exp_avg_sq.get(name)
        m = (cfg.beta1 * m + (1 - cfg.beta1) * g) if m is not None else (1 - cfg.beta1) * g
        v = (cfg.beta2 * v + (1 - cfg.beta2) * g * g) if v is not None else (1 - cfg.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        new_params[name] = p - lr * (m_hat / (np.sqrt(v_hat) + cfg.epsilon)) \
            - lr * cfg.weight_decay * p
        new_state.exp_avg[name] = m
        new_state.exp_avg_sq[name] = v
    return new_params, new_state
