"""Cosine learning-rate schedule and an AdamW step over dicts of arrays."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class OptimError(ValueError):
    pass


def cosine_lr(step: int, total: int, lr0: float, factor: float = 1e-3) -> float:
    """``lr_end + (lr0 - lr_end) * (1 + cos(pi * step / total)) / 2``, ``lr_end = lr0 * factor``."""
    if step < 0 or step > total:
        raise OptimError(f"step {step} outside [0, {total}]")
    if total == 0:
        return lr0
    lr_end = lr0 * factor
    return lr_end + (lr0 - lr_end) * (1.0 + math.cos(math.pi * step / total)) / 2.0


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 1e-2,
) -> None:
    """In-place AdamW update with bias-corrected moments and decoupled decay."""
    for name, g in grads.items():
        if name not in params or params[name].shape != g.shape:
            raise OptimError(f"gradient {name!r} does not match any parameter")
        if not np.isfinite(g).all():
            raise OptimError(f"non-finite gradient for parameter {name!r}")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    step = lr / c1
    for name, g in grads.items():
        p = params[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        denom = np.sqrt(v / c2)
        denom += eps
        np.divide(m, denom, out=denom)
        denom *= step
        p -= denom
