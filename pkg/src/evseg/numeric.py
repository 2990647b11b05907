"""Dense-array kernels shared by all modules.

Probability maps are float64 arrays of shape (K, H, W) whose class axis
sums to one per pixel; label maps are integer (H, W) arrays. All log-based
quantities clamp their arguments at ``EPS`` so one-hot inputs stay finite,
and every function here is pure.
"""

import numpy as np

EPS = 1e-12


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class NumericInputError(ValueError):
    """An input contains NaN or infinity."""


class DistributionError(ValueError):
    """An input that must lie on the probability simplex does not."""


def softmax(logits, axis=0):
    """Numerically stable softmax along ``axis``; other axes untouched."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NumericInputError("softmax input contains non-finite values")
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _check_simplex(v, name):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"{name} must be a 1-d distribution vector")
    if np.any(v < -EPS) or abs(v.sum() - 1.0) > 1e-9:
        raise DistributionError(f"{name} is not on the probability simplex")
    return v


def kl_div(p, q):
    """KL(p || q) in nats, with 0*ln(0) = 0 and q clamped below by EPS."""
    p = _check_simplex(p, "p")
    q = _check_simplex(q, "q")
    if p.shape != q.shape:
        raise ShapeError("p and q must have equal length")
    ratio = np.log(np.maximum(p, EPS)) - np.log(np.maximum(q, EPS))
    return float(np.where(p > 0.0, p * ratio, 0.0).sum())


def js_div(p, q):
    """Jensen-Shannon divergence in nats; symmetric, bounded by ln 2."""
    p = _check_simplex(p, "p")
    q = _check_simplex(q, "q")
    if p.shape != q.shape:
        raise ShapeError("p and q must have equal length")
    m = (p + q) / 2.0
    return 0.5 * kl_div(p, m) + 0.5 * kl_div(q, m)


def cross_entropy(pred, target, mask=None):
    """Mean cross entropy over (mask-included) pixels.

    ``pred`` is a (K, H, W) probability map. ``target`` is either another
    probability map of the same shape or an integer (H, W) label map,
    treated as one-hot. ``mask`` is an optional (H, W) boolean array; True
    keeps the pixel. Returns 0.0 when no pixel is kept.
    """
    pred = np.asarray(pred, dtype=np.float64)
    if pred.ndim != 3:
        raise ShapeError("pred must have shape (K, H, W)")
    k, h, w = pred.shape
    target = np.asarray(target)
    log_pred = np.log(np.clip(pred, EPS, None))
    if target.ndim == 2:
        if target.shape != (h, w):
            raise ShapeError("label map shape does not match pred")
        per_pixel = -np.take_along_axis(
            log_pred, target.reshape(1, h, w).astype(np.int64), axis=0
        )[0]
    elif target.shape == pred.shape:
        per_pixel = -(target * log_pred).sum(axis=0)
    else:
        raise ShapeError("target shape does not match pred")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (h, w):
            raise ShapeError("mask shape does not match pred")
        if not mask.any():
            return 0.0
        return float(per_pixel[mask].mean())
    return float(per_pixel.mean())


def ema_blend(old, new, decay):
    """decay*old + (1-decay)*new, elementwise."""
    old = np.asarray(old, dtype=np.float64)
    new = np.asarray(new, dtype=np.float64)
    if old.shape != new.shape:
        raise ShapeError("ema_blend operands must have equal shapes")
    if not 0.0 <= decay <= 1.0:
        raise ValueError("decay must lie in [0, 1]")
    return decay * old + (1.0 - decay) * new


def argmax_map(prob):
    """Per-pixel argmax of a (K, H, W) probability map.

    Ties break toward the smallest class index.
    """
    prob = np.asarray(prob, dtype=np.float64)
    if prob.ndim != 3:
        raise ShapeError("prob must have shape (K, H, W)")
    return prob.argmax(axis=0).astype(np.int64)


def is_prob_map(arr, tol=1e-9) -> bool:
    """True when ``arr`` is a valid (K, H, W) probability map."""
    arr = np.asarray(arr)
    if arr.ndim != 3:
        return False
    if np.any(arr < 0.0):
        return False
    return bool(np.all(np.abs(arr.sum(axis=0) - 1.0) <= tol))


def one_hot(labels, num_classes):
    """(K, H, W) one-hot encoding of an integer label map."""
    labels = np.asarray(labels, dtype=np.int64)
    h, w = labels.shape
    out = np.zeros((num_classes, h, w), dtype=np.float64)
    rows, cols = np.indices((h, w))
    out[labels, rows, cols] = 1.0
    return out
