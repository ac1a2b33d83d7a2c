from __future__ import annotations

from typing import Callable

import numpy as np

from .params import ParamStore
from .tensor import Tensor


def grad_check(
    forward_fn: Callable[[], Tensor], params: ParamStore, eps: float = 1e-5
) -> float:
    """Largest disagreement between backprop and central differences.

    The error for one entry is ``|a - n| / max(1, |a|, |n|)``; the maximum over
    every entry of every parameter is returned.
    """
    params.zero_grad()
    forward_fn().backward()
    analytic = params.grads()
    params.zero_grad()

    worst = 0.0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = forward_fn().item()
            flat[i] = orig - eps
            down = forward_fn().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            a = a_flat[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst
