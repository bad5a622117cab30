"""Adam with bias correction."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


def adam_step(params, grads, state, lr=4e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """Update ``params`` in place from ``grads`` (both keyed by name).

    ``state`` holds ``"t"`` and per-name first/second moments under ``"m"``
    and ``"v"``; it is created on first use. Missing grads count as zero.
    """
    state.setdefault("t", 0)
    m, v = state.setdefault("m", {}), state.setdefault("v", {})
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        data = p.data if isinstance(p, Tensor) else p
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(data)
        if name not in m:
            m[name] = np.zeros_like(data)
            v[name] = np.zeros_like(data)
        m[name] *= beta1
        m[name] += (1.0 - beta1) * g
        v[name] *= beta2
        v[name] += (1.0 - beta2) * g * g
        data -= lr * (m[name] / c1) / (np.sqrt(v[name] / c2) + eps)
    return params


class Adam:
    def __init__(self, params, lr=4e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state: dict = {"t": 0, "m": {}, "v": {}}

    def step(self):
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None
