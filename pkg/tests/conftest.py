"""Shared test oracles: central finite differences and gradient comparison."""

import numpy as np


def finite_diff(f, vec, step=1e-6):
    """Central-difference gradient of scalar f at vec, one coordinate at a time."""
    vec = np.asarray(vec, dtype=np.float64)
    grad = np.zeros_like(vec)
    for i in range(vec.size):
        up = vec.copy()
        up[i] += step
        down = vec.copy()
        down[i] -= step
        grad[i] = (f(up) - f(down)) / (2.0 * step)
    return grad


def max_rel_error(analytic, fd):
    """Worst relative disagreement, scaled so near-zero entries compare fairly.

    Entries far below the gradient's own magnitude are dominated by
    finite-difference roundoff (~1e-10 absolute), so the denominator is
    floored at a fraction of the largest analytic entry.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    fd = np.asarray(fd, dtype=np.float64)
    scale = max(1e-8, 1e-3 * float(np.abs(analytic).max()))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), scale)
    return float(np.max(np.abs(analytic - fd) / denom))
