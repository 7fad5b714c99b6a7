"""Adam optimizer over named parameter dicts."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params: dict, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    m = {k: np.zeros_like(p) for k, p in params.items()}
    v = {k: np.zeros_like(p) for k, p in params.items()}
    return AdamState(m=m, v=v, step=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: dict, grads: dict, state: AdamState):
    """One bias-corrected Adam update.  Returns (new_params, new_state).

    Inputs are left untouched; identical inputs give bit-identical
    outputs.
    """
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            raise ValueError(f"missing gradient for parameter '{k}'")
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ValueError(
                f"shape mismatch for '{k}': param {p.shape}, grad {g.shape}, "
                f"moment {state.m[k].shape}"
            )

    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t

    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * (g * g)
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        q = p - update
        if not np.all(np.isfinite(q)):
            raise NumericError(f"non-finite parameter '{k}' after Adam update")
        new_params[k] = q
        new_m[k] = m
        new_v[k] = v

    new_state = AdamState(m=new_m, v=new_v, step=t, lr=state.lr,
                          beta1=b1, beta2=b2, eps=state.eps)
    return new_params, new_state
