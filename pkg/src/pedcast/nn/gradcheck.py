"""Central finite-difference gradient checks."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


def gradcheck(fn, tensors: dict, step: float = 1e-5, coords_per_tensor: int | None = 4,
              rng: np.random.Generator | None = None, floor: float = 1e-6) -> dict:
    """Compare analytic and central-difference gradients of scalar ``fn()``.

    ``tensors`` maps names to leaf tensors that ``fn`` reads. With
    ``coords_per_tensor=None`` every coordinate is checked. Returns the
    worst relative error ``|a - n| / max(max|a|, |n|)`` per tensor.
    """
    rng = rng or np.random.default_rng(0)
    # error is measured against each tensor's largest analytic gradient so that
    # near-zero entries do not turn round-off into large ratios
    for t in tensors.values():
        t.grad = None
        t.requires_grad = True
    out = fn()
    out.backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for k, t in tensors.items()}
    worst = {}
    for name, t in tensors.items():
        scale = max(float(np.abs(analytic[name]).max(initial=0.0)), floor)
        flat = t.data.reshape(-1)
        if coords_per_tensor is None or coords_per_tensor >= flat.size:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=coords_per_tensor, replace=False)
        err = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = fn().item()
            flat[i] = orig - step
            fm = fn().item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * step)
            a = analytic[name].reshape(-1)[i]
            err = max(err, abs(a - num) / max(scale, abs(num)))
        worst[name] = err
    return worst


def weighted_sum(t: Tensor, rng: np.random.Generator) -> Tensor:
    """Random linear functional of ``t``; a generic scalar head for checks."""
    w = Tensor(rng.normal(size=t.shape))
    return (t * w).sum()
