"""Central finite-difference gradient checking.

The checker re-evaluates the loss as a plain forward pass (no tape), so it is
independent of the reverse-mode path it verifies.
"""

import numpy as np


def numeric_grad(f, x, h=1e-5):
    """d f / d x by central differences, perturbing ``x`` in place element-wise.

    ``f`` takes no arguments and must read the current contents of ``x``;
    it returns a python float.
    """
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_error(analytic, numeric, floor=1e-6):
    """Largest element-wise relative error between two gradient arrays.

    Elements where both magnitudes fall below ``floor`` are treated as zero
    error: central differences cannot resolve them and exact zeros would
    otherwise divide by zero.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    rel = np.where(scale < floor, 0.0, diff / np.maximum(scale, floor))
    return float(rel.max()) if rel.size else 0.0


def check_gradients(loss_fn, params, h=1e-5, floor=1e-6):
    """Compare taped gradients of ``loss_fn`` against central differences.

    ``loss_fn`` builds the loss from the current parameter values and returns
    a scalar Tensor when run under a tape, or its float value otherwise is
    taken from ``.item()``. Returns the worst relative error across all
    ``params``.
    """
    from .tensor import Tape, backward

    with Tape() as tape:
        loss = loss_fn()
    grads = backward(tape, loss)

    worst = 0.0
    for p in params:
        num = numeric_grad(lambda: loss_fn().item(), p.data, h=h)
        worst = max(worst, max_rel_error(grads.get(p), num, floor=floor))
    return worst
