"""Losses returning ``(value, gradient w.r.t. the prediction)``."""

from __future__ import annotations

import numpy as np


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_loss(logits: np.ndarray, targets) -> tuple[float, np.ndarray]:
    """Mean over the batch of -log softmax(logits)[target]."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.intp)
    b, c = logits.shape
    if targets.shape != (b,):
        raise ValueError(f"targets shape {targets.shape} != ({b},)")
    if np.any((targets < 0) | (targets >= c)):
        raise ValueError(f"target index out of range 0..{c - 1}")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    loss = float(np.mean(log_norm - z[rows, targets]))
    grad = np.exp(z - log_norm[:, None])
    grad[rows, targets] -= 1.0
    return loss, grad / b


def mse_loss(pred: np.ndarray, targets) -> tuple[float, np.ndarray]:
    """Mean squared residual over the batch; ``pred`` is ``(batch, 1)`` or ``(batch,)``."""
    pred = np.asarray(pred, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    flat = pred.reshape(-1) if pred.ndim == 1 or pred.shape[1:] == (1,) else None
    if flat is None or flat.shape != t.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match {t.shape[0]} targets")
    resid = flat - t
    loss = float(np.mean(resid**2))
    return loss, (2.0 / t.size * resid).reshape(pred.shape)
