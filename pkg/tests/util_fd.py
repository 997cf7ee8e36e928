"""Central finite-difference harness over named model parameters."""

import numpy as np


def finite_diff_named(params: dict, value_fn, h=1e-5, keys=None):
    """Central differences of value_fn() w.r.t. every entry of each array."""
    out = {}
    for name in (keys if keys is not None else params):
        arr = params[name]
        grad = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            plus = value_fn()
            arr[idx] = orig - h
            minus = value_fn()
            arr[idx] = orig
            grad[idx] = (plus - minus) / (2 * h)
        out[name] = grad
    return out


def max_rel_error(analytic: dict, numeric: dict) -> float:
    """Worst-case elementwise relative error with a scale-aware floor.

    The denominator adds a small fraction of the largest gradient magnitude
    so that components far below the objective's finite-difference noise
    floor cannot dominate the metric, while genuine errors (even sign flips
    on small entries) still register orders of magnitude above tolerance.
    """
    gscale = max(
        max(float(np.max(np.abs(a))) for a in analytic.values()),
        max(float(np.max(np.abs(b))) for b in numeric.values()),
        1e-8,
    )
    worst = 0.0
    for name, a in analytic.items():
        b = numeric[name]
        denom = np.abs(a) + np.abs(b) + 1e-3 * gscale
        worst = max(worst, float(np.max(np.abs(a - b) / denom)))
    return worst
