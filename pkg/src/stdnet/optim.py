"""Adam with bias correction and the step-halving learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradient(FloatingPointError):
    pass


def lr_at(epoch: int, base_lr: float = 1e-4, halve_every: int = 30) -> float:
    """base_lr / 2**floor(epoch / halve_every)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return base_lr / 2 ** (epoch // halve_every)


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """Update ``params`` in place (and return it).

    Raises :class:`NonFiniteGradient` before touching anything if any gradient
    entry is NaN/Inf.
    """
    if state.lr <= 0:
        raise ValueError("lr must be positive")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: grad shape {g.shape} != param shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params
