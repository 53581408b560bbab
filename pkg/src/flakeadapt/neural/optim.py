from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-4):
    """One Adam update with bias correction and decoupled weight decay.

    ``params`` and ``grads`` are parallel lists of arrays; ``None`` grads are
    treated as zero. Returns new parameter arrays; ``state`` is updated in place.
    """
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    c1 = 1 - beta1**t
    c2 = 1 - beta2**t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p)
        m = state.m[i] = beta1 * state.m[i] + (1 - beta1) * g
        v = state.v[i] = beta2 * state.v[i] + (1 - beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        out.append((p - lr * (update + weight_decay * p)).astype(p.dtype))
    return out


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-4):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamState()

    def step(self):
        new = adam_step(
            [p.data for p in self.params],
            [p.grad for p in self.params],
            self.state,
            self.lr,
            self.beta1,
            self.beta2,
            self.eps,
            self.weight_decay,
        )
        for p, d in zip(self.params, new):
            p.data = d

    def zero_grad(self):
        for p in self.params:
            p.grad = None
