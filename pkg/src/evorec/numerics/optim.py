"""Adam with bias correction; l2 decay is folded into the gradient."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NonFiniteError, ShapeError


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params, **hyper):
        state = cls(**hyper)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        return state


def adam_step(params, grads, state: AdamState):
    """Update ``params`` in place and return ``(params, state)``.

    The effective gradient is ``grad + 2 * weight_decay * param``, i.e. the
    gradient of ``weight_decay * ||param||^2`` is added before the moments.
    Parameters without an entry in ``grads`` get a zero data gradient.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is not None:
            if g.shape != p.shape:
                raise ShapeError(f"grad[{name}]", p.shape, g.shape)
            if not np.all(np.isfinite(g)):
                raise NonFiniteError("gradient", name)
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        elif state.m[name].shape != p.shape:
            raise ShapeError(f"adam.m[{name}]", p.shape, state.m[name].shape)

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if state.weight_decay:
            g = g + (2.0 * state.weight_decay) * p
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / corr1
        v_hat = v / corr2
        p -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)
    return params, state
