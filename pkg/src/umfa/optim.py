"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from umfa.tensor import Tensor


@dataclass
class AdamState:
    """Moment buffers keyed by parameter position, plus hyperparameters."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """One in-place Adam update of ``params``; gradients are zeroed afterwards."""
    for i, p in enumerate(params):
        if p.grad is None:
            label = p.name or f"#{i}"
            raise ValueError(f"adam_step: parameter {label} has no gradient")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    elif len(state.m) != len(params):
        raise ValueError(f"adam_step: state tracks {len(state.m)} parameters, got {len(params)}")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, m, v in zip(params, state.m, state.v):
        if m.shape != p.shape:
            raise ValueError(f"adam_step: moment shape {m.shape} != parameter shape {p.shape}")
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data -= step.astype(p.dtype, copy=False)
        p.grad = np.zeros_like(p.data)
