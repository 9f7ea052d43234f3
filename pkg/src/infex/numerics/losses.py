"""Scalar losses. Each returns ``(value, grad_wrt_first_argument)``."""

import numpy as np

from ..errors import ConfigurationError
from .layers import DTYPE

BCE_CLAMP = 1e-7


def _check(a, b, name):
    if a.shape != b.shape:
        raise ConfigurationError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def bce_loss(pred, target):
    """Per-pixel Bernoulli cross-entropy, averaged over pixels and batch.

    ``pred`` is clamped to ``[1e-7, 1 - 1e-7]`` here only; the gradient is
    evaluated at the clamped value so it stays finite at saturation.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    _check(pred, target, "bce_loss")
    p = np.clip(pred.astype(np.float64), BCE_CLAMP, 1.0 - BCE_CLAMP)
    t = target.astype(np.float64)
    loss = -np.mean(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    grad = (p - t) / (p * (1.0 - p)) / p.size
    return float(loss), grad.astype(DTYPE)


def mse_loss(pred, target):
    pred = np.asarray(pred)
    target = np.asarray(target)
    _check(pred, target, "mse_loss")
    diff = pred.astype(np.float64) - target
    return float(np.mean(diff * diff)), (2.0 * diff / diff.size).astype(DTYPE)


def l2_distance(u, v):
    """Euclidean norm of ``u - v`` and its gradient w.r.t. ``u`` (zero at coincidence)."""
    u = np.asarray(u)
    v = np.asarray(v)
    _check(u, v, "l2_distance")
    diff = u.astype(np.float64) - v
    dist = float(np.sqrt(np.sum(diff * diff)))
    grad = diff / dist if dist > 0 else np.zeros_like(diff)
    return dist, grad.astype(DTYPE)


def rowwise_l2(u, v):
    """Per-row distances of two ``(N, D)`` batches and the gradient of their mean w.r.t. ``u``."""
    u = np.asarray(u)
    v = np.asarray(v)
    _check(u, v, "rowwise_l2")
    diff = u.astype(np.float64) - v
    dist = np.sqrt(np.sum(diff * diff, axis=1))
    safe = np.where(dist > 0, dist, 1.0)
    grad = np.where(dist[:, None] > 0, diff / safe[:, None], 0.0) / len(dist)
    return dist, grad.astype(DTYPE)
