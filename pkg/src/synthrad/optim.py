from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from synthrad.autodiff import Tensor


class MissingGradError(RuntimeError):
    pass


@dataclass
class AdamState:
    """Moment buffers and step counter for :func:`adam_step`.

    Buffers are created lazily, one pair per parameter in the order the
    parameters are passed.  Parameters may be appended between steps.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update in place, then clear the gradients."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise MissingGradError(f"parameter {p.name or i!s} has no gradient")
    # parameters appended after the last step (network growth) start from zero moments
    for p in params[len(state.m):]:
        state.m.append(np.zeros_like(p.data))
        state.v.append(np.zeros_like(p.data))
    if len(state.m) != len(params):
        raise ValueError(f"optimizer holds {len(state.m)} moment buffers, got {len(params)} parameters")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, m, v in zip(params, state.m, state.v):
        if m.shape != p.shape:
            raise ValueError(f"moment buffer {m.shape} does not match parameter {p.name} {p.shape}")
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data -= step.astype(p.data.dtype)
        p.grad = None
