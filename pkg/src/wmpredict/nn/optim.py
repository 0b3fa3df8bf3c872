"""Plain stochastic gradient descent."""

from __future__ import annotations

from typing import Mapping

import numpy as np


def sgd_step(params, grads, lr: float):
    """In-place ``p -= lr * g`` for each pair; no momentum, no weight decay.

    ``params`` and ``grads`` are parallel sequences or dicts with equal keys.
    Returns ``params``.
    """
    if isinstance(params, Mapping):
        if set(params) != set(grads):
            raise ValueError("parameter and gradient names differ")
        pairs = [(params[k], grads[k], k) for k in params]
    else:
        if len(params) != len(grads):
            raise ValueError("parameter and gradient counts differ")
        pairs = [(p, g, i) for i, (p, g) in enumerate(zip(params, grads))]
    for p, g, key in pairs:
        if np.shape(p) != np.shape(g):
            raise ValueError(f"{key}: parameter shape {np.shape(p)} != gradient shape {np.shape(g)}")
    if lr == 0:
        return params
    for p, g, _ in pairs:
        p -= lr * g
    return params


def step_decay(base_lr: float, epoch: int, step: int = 0, gamma: float = 0.1) -> float:
    """Learning rate for a 0-based epoch; ``step=0`` keeps it constant."""
    if step <= 0:
        return base_lr
    return base_lr * gamma ** (epoch // step)

