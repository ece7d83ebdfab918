"""Central finite-difference verification of backward passes."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


def finite_difference_check(
    loss_fn: Callable[[], float],
    arrays: Sequence[np.ndarray],
    analytic: Sequence[np.ndarray],
    h: float = 1e-5,
) -> float:
    """Max relative error between analytic gradients and central differences.

    ``loss_fn`` must recompute the scalar from the current contents of
    ``arrays``, which are perturbed in place one element at a time.  The
    relative error for one element is |a - n| / max(|a|, |n|, 1e-8).
    """
    worst = 0.0
    for arr, grad in zip(arrays, analytic):
        if arr.shape != grad.shape:
            raise ValueError(f"gradient shape {grad.shape} != array shape {arr.shape}")
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            num = (up - down) / (2.0 * h)
            err = abs(gflat[i] - num) / max(abs(gflat[i]), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
