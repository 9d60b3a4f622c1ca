"""AdamW with decoupled weight decay and a linear warmup / linear decay schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Parameters never weight-decayed.
NO_DECAY = frozenset({"head_b"})


class OptimizerError(ValueError):
    pass


@dataclass
class AdamWState:
    total_steps: int
    peak_lr: float = 1e-4
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_fraction: float = 0.10
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def warmup_steps(self) -> int:
        return math.ceil(self.warmup_fraction * self.total_steps)


def init_state(params: dict[str, np.ndarray], total_steps: int, **hyper) -> AdamWState:
    state = AdamWState(total_steps=total_steps, **hyper)
    if state.total_steps <= state.warmup_steps:
        raise OptimizerError(
            f"total_steps ({state.total_steps}) must exceed warmup_steps ({state.warmup_steps})"
        )
    state.m = {k: np.zeros_like(v) for k, v in params.items()}
    state.v = {k: np.zeros_like(v) for k, v in params.items()}
    return state


def lr_at(t: int, state: AdamWState) -> float:
    """Learning rate for the 1-based step ``t``."""
    total, warm = state.total_steps, state.warmup_steps
    if total <= warm:
        raise OptimizerError(f"total_steps ({total}) must exceed warmup_steps ({warm})")
    if not 1 <= t <= total:
        raise OptimizerError(f"step {t} outside [1, {total}]")
    if t <= warm:
        return state.peak_lr * t / warm
    return max(0.0, state.peak_lr * (total - t) / (total - warm))


def step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamWState,
         lr: float | None = None) -> float:
    """One in-place AdamW update of ``params`` in key order; returns the lr used.

    ``lr`` overrides the schedule (constant-rate use).

    Decay is applied as ``theta *= 1 - lr * wd`` before the Adam step, which is
    the decoupled update evaluated at the pre-step weights.
    """
    for name, g in grads.items():
        if name not in params:
            raise OptimizerError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise OptimizerError(f"shape mismatch for {name}: {g.shape} vs {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient for parameter {name!r}")

    t = state.step + 1
    if lr is None:
        lr = lr_at(t, state)
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, theta in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if name not in NO_DECAY and state.weight_decay:
            theta *= 1.0 - lr * state.weight_decay
        theta -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    state.step = t
    return lr
