"""
Central finite differences for checking analytic Jacobians.
"""

import logging

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_REL_STEP = 1e-4


def central_difference_jacobian(func, x, rel_step=DEFAULT_REL_STEP):
    """Jacobian of ``func`` at ``x`` with a per-coordinate step ``rel_step * |x_k|``.

    ``func`` maps a 1-D array to a 1-D array (or scalar); the result has shape
    ``(len(func(x)), len(x))``.
    """
    x0 = np.asarray(x, dtype=float).reshape(-1)
    f0 = np.atleast_1d(np.asarray(func(x0.copy()), dtype=float))
    jacobian = np.zeros((f0.size, x0.size))
    for k in range(x0.size):
        step = rel_step * abs(x0[k]) if x0[k] != 0.0 else rel_step
        plus = x0.copy()
        minus = x0.copy()
        plus[k] += step
        minus[k] -= step
        f_plus = np.atleast_1d(np.asarray(func(plus), dtype=float))
        f_minus = np.atleast_1d(np.asarray(func(minus), dtype=float))
        jacobian[:, k] = (f_plus - f_minus) / (2.0 * step)
    return jacobian


def max_relative_error(analytic, numeric, floor=1e-3):
    """Largest elementwise relative error.

    Each row is normalized by ``max(|analytic|, |numeric|)`` but never by less
    than ``floor`` times the row's largest numeric entry, so columns that are
    zero up to rounding do not dominate.
    """
    a = np.atleast_2d(np.asarray(analytic, dtype=float))
    n = np.atleast_2d(np.asarray(numeric, dtype=float))
    if a.shape != n.shape:
        raise ValueError(f"Shape mismatch: {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    row_scale = floor * np.max(np.abs(n), axis=1, keepdims=True)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), row_scale)
    diff = np.abs(a - n)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(scale > 0, diff / scale, np.where(diff > 0, np.inf, 0.0))
    worst = float(np.max(ratio))
    logger.debug(f"max relative error {worst:.3e}")
    return worst
