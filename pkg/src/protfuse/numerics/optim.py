"""AdamW with decoupled weight decay and a one-cycle learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractViolation

# one-cycle start rate is peak/START_DIV, final rate is peak/FINAL_DIV
START_DIV = 25.0
FINAL_DIV = 1000.0


@dataclass
class OptimState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_update(params: dict, grads: dict, state: OptimState, lr: float | None = None):
    """One AdamW step, in place on ``params`` (name -> ndarray or Var)."""
    if state.step < 0:
        raise ContractViolation("optimizer step counter must be >= 0")
    lr = state.lr if lr is None else lr
    b1, b2 = state.betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        value = getattr(p, "value", p)
        g = grads[name]
        if g.shape != value.shape:
            raise ContractViolation(f"gradient shape {g.shape} != parameter shape {value.shape} for {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)
        v = state.v[name]
        if m.shape != value.shape:
            raise ContractViolation(f"optimizer state shape mismatch for {name!r}")
        if state.weight_decay:
            value *= 1.0 - lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        value -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


@dataclass(frozen=True)
class LrSchedule:
    peak: float
    warmup_frac: float
    total_steps: int

    def __post_init__(self):
        if self.peak <= 0:
            raise ContractViolation("peak rate must be positive")
        if not 0.0 < self.warmup_frac < 1.0:
            raise ContractViolation("warmup fraction must lie in (0, 1)")
        if self.total_steps < 3:
            raise ContractViolation("one-cycle schedule needs at least 3 steps")

    @property
    def warmup_end(self) -> int:
        end = int(round(self.warmup_frac * (self.total_steps - 1)))
        return min(max(end, 1), self.total_steps - 2)


def onecycle_rate(schedule: LrSchedule, step: int) -> float:
    """Linear ramp from peak/25 to peak, then cosine anneal to peak/1000 at the last step."""
    n = schedule.total_steps
    if not 0 <= step < n:
        raise ContractViolation(f"step {step} outside [0, {n})")
    peak = schedule.peak
    start, final = peak / START_DIV, peak / FINAL_DIV
    w = schedule.warmup_end
    if step == w:
        return peak
    if step < w:
        return start + (peak - start) * step / w
    frac = (step - w) / (n - 1 - w)
    return final + (peak - final) * 0.5 * (1.0 + math.cos(math.pi * frac))
