"""Pure-NumPy implementations of the training hot kernels.

Semantics (shapes, update rule, masking) are shared with the compiled
extension ``iwelab._ckernels``; only summation order may differ, so the two
backends agree to float64 rounding, not bitwise.  Within one backend every
run is bit-deterministic.
"""

from __future__ import annotations

import numpy as np

NAME = "numpy"


def affine(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """y[n, o] = x[n, :] . w[o, :] + b[o]."""
    return x @ w.T + b


def affine_bwd(x, w, dy, need_dx=True):
    """Gradients of ``affine``: returns (dx or None, dw, db)."""
    dx = dy @ w if need_dx else None
    dw = dy.T @ x
    db = dy.sum(axis=0)
    return dx, dw, db


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_bwd(act: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Backprop through relu given its output ``act``."""
    return np.where(act > 0.0, dy, 0.0)


def sgd_update(param, grad, vel, lr, momentum, weight_decay):
    """In-place step: vel = momentum*vel + grad + wd*param; param -= lr*vel."""
    vel *= momentum
    vel += grad
    if weight_decay != 0.0:
        vel += weight_decay * param
    param -= lr * vel
