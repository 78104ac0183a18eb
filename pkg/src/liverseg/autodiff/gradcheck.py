"""Central finite-difference gradient checks."""
from __future__ import annotations

import numpy as np


def step_size(x):
    return 1e-4 * np.maximum(1.0, np.abs(x))


def relative_error(analytic, numeric):
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / scale)


def numerical_grad(loss_fn, tensor, indices=None):
    """d loss / d tensor by central differences, h = 1e-4 * max(1, |x|) per entry.

    ``loss_fn`` is re-evaluated from scratch and must return a float.  With
    ``indices`` only those flat entries are perturbed (the rest stay zero).
    """
    flat = tensor.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        h = float(step_size(orig))
        flat[i] = orig + h
        up = loss_fn()
        flat[i] = orig - h
        down = loss_fn()
        flat[i] = orig
        grad[i] = (up - down) / (2.0 * h)
    return grad.reshape(tensor.shape)


def directional_error(loss_fn, tensor, analytic, rng):
    """Relative error of <grad, r> against the central difference of loss along a random r."""
    r = rng.standard_normal(tensor.shape)
    r /= np.linalg.norm(r)
    base = tensor.data.copy()
    h = 1e-4 * max(1.0, float(np.abs(base).max()))
    tensor.data[...] = base + h * r
    up = loss_fn()
    tensor.data[...] = base - h * r
    down = loss_fn()
    tensor.data[...] = base
    numeric = (up - down) / (2.0 * h)
    exact = float((np.asarray(analytic) * r).sum())
    return abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-12)


def check_op(build_loss, tensors):
    """Max relative error over ``tensors`` for a loss rebuilt by ``build_loss()`` (returns a Tensor)."""
    for t in tensors:
        t.zero_grad()
    build_loss().backward()
    worst = 0.0
    for t in tensors:
        num = numerical_grad(lambda: float(build_loss().data), t)
        worst = max(worst, relative_error(t.grad, num))
    return worst
