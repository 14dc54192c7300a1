"""Central finite differences for checking hand-written backward passes."""

import numpy as np

__all__ = ["numerical_grad", "rel_error"]


def numerical_grad(f, x, eps=1e-6, indices=None):
    """Central-difference gradient of scalar ``f()`` w.r.t. array ``x`` (perturbed in place).

    Only ``indices`` (flat positions) are evaluated when given; the rest of
    the returned array is NaN.
    """
    flat = x.reshape(-1)
    grad = np.full(flat.shape, np.nan) if indices is not None else np.zeros(flat.shape)
    for idx in (range(flat.size) if indices is None else indices):
        old = flat[idx]
        flat[idx] = old + eps
        fp = f()
        flat[idx] = old - eps
        fm = f()
        flat[idx] = old
        grad[idx] = (fp - fm) / (2 * eps)
    return grad.reshape(x.shape)


def rel_error(a, b, floor=1e-12):
    """Max over elements of ``|a - b| / max(|a|, |b|, floor)``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
