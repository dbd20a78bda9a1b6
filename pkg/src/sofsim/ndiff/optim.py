"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class AdamState:
    lr: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: list[Tensor], grads: list[np.ndarray | None] | None = None) -> None:
    """Update ``params`` in place from ``grads`` (defaults to each ``param.grad``).

    Moments are keyed by position in ``params``, so pass the same list every step.
    Parameters without a gradient are left untouched.
    """
    grads = [p.grad for p in params] if grads is None else grads
    if len(grads) != len(params):
        raise ShapeError(f"adam_step: {len(params)} parameters but {len(grads)} gradients")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient {g.shape} vs parameter {p.shape}")
        m = state.m.get(i)
        if m is None:
            m = np.zeros_like(p.value)
            state.v[i] = np.zeros_like(p.value)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        state.m[i], state.v[i] = m, v
        p.value = p.value - (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.value.dtype)
