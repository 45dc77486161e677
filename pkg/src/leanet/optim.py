"""Adam with bias correction, keyed by parameter name."""
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """Update ``params`` (name -> Tensor) in place from ``grads`` (name -> array).

    Parameters without a gradient entry are left untouched but still share
    the step counter.
    """
    state.t += 1
    t = state.t
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name in sorted(params):
        g = grads.get(name)
        if g is None:
            continue
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}", module="optim")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * np.square(g)
        state.m[name], state.v[name] = m.astype(p.data.dtype), v.astype(p.data.dtype)
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - step).astype(p.data.dtype)
    return params, state
