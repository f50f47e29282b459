"""Central finite-difference gradient checks."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, grad


def numeric_grad(f, arrays, index, step=1e-5):
    """d f / d arrays[index] by central differences; ``f`` maps arrays -> float."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    x = base[index]
    out = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + step
        fp = f(base)
        x[i] = orig - step
        fm = f(base)
        x[i] = orig
        out[i] = (fp - fm) / (2 * step)
    return out


def rel_error(a, b, floor=1e-8):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), floor)))


def check_op(fn, arrays, step=1e-5, seed=0):
    """Compare autodiff and finite differences for ``sum(fn(*tensors) * R)``.

    ``R`` is a fixed random projection so every output element matters.
    Returns the worst relative error over all inputs (64-bit).
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    out = fn(*[Tensor(a, dtype=np.float64) for a in arrays])
    proj = np.random.default_rng(seed).normal(size=out.shape)

    def scalar(arrs):
        return float(np.sum(fn(*[Tensor(a, dtype=np.float64) for a in arrs]).data * proj))

    ts = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    loss = (fn(*ts) * Tensor(proj, dtype=np.float64)).sum()
    analytic = grad(loss, ts)
    worst = 0.0
    for i in range(len(arrays)):
        num = numeric_grad(scalar, arrays, i, step)
        worst = max(worst, rel_error(analytic[i], num))
    return worst
