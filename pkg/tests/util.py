"""Shared helpers: central finite differences and tolerance comparison."""

import numpy as np


def central_fd(func, x, step=1e-4):
    """Gradient of scalar func at array x by central differences (64-bit)."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp = x.copy()
        xp[i] += step
        xm = x.copy()
        xm[i] -= step
        grad[i] = (func(xp) - func(xm)) / (2 * step)
    return grad


def max_rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def assert_grad_close(analytic, fd, tol=1e-4, floor=1e-6):
    err = max_rel_err(analytic, fd, floor)
    assert err < tol, f"gradient mismatch: max relative error {err:.3e} >= {tol}"
