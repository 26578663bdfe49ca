"""Adam with bias correction and global-norm gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericalError

BETA1, BETA2, EPS = 0.9, 0.999, 1e-8
CLIP_NORM = 10.0


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def clip_by_global_norm(grads: dict, max_norm=CLIP_NORM):
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is None or total <= max_norm:
        return grads, total
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}, total


def optimizer_step(params: dict, grads: dict, state: AdamState, lr: float,
                   clip_norm=CLIP_NORM, betas=(BETA1, BETA2), eps=EPS) -> dict:
    """One Adam update on arrays; returns the new parameter dict and advances ``state``.

    Parameters without a gradient entry are left untouched.
    """
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {k!r}", index=k)
    grads, _ = clip_by_global_norm(grads, clip_norm)
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    new = dict(params)
    for k, g in grads.items():
        m = b1 * state.m.get(k, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(k, 0.0) + (1.0 - b2) * g * g
        state.m[k], state.v[k] = m, v
        new[k] = params[k] - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return new


class Adam:
    """Stateful wrapper updating ``Value`` parameters in place from their ``.grad``."""

    def __init__(self, named_params: dict, lr=1e-3, clip_norm=CLIP_NORM):
        self.params = named_params
        self.lr = lr
        self.clip_norm = clip_norm
        self.state = AdamState()

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        arrays = {k: p.data for k, p in self.params.items()}
        new = optimizer_step(arrays, grads, self.state, self.lr, self.clip_norm)
        for k in grads:
            self.params[k].data = new[k]
