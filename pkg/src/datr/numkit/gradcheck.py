"""Central finite-difference oracle for reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from .tensor import NonFiniteError, Tensor


def numeric_grad(f, params, step: float = 1e-5, indices=None) -> list:
    """Central differences ``(f(x+h) - f(x-h)) / 2h`` for every (or selected) entry."""
    out = []
    for k, p in enumerate(params):
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        sel = range(flat.size) if indices is None else indices[k]
        for i in sel:
            orig = flat[i]
            flat[i] = orig + step
            fp = _scalar(f())
            flat[i] = orig - step
            fm = _scalar(f())
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * step)
        out.append(g)
    return out


def _scalar(value) -> float:
    v = float(value.data if isinstance(value, Tensor) else value)
    if not np.isfinite(v):
        raise NonFiniteError("objective is not finite")
    return v


def grad_check(f, params, step: float = 1e-5, max_entries: int | None = None, seed: int = 0) -> float:
    """Worst relative error between analytic and numeric gradients.

    ``f`` is called without arguments and must return a scalar tensor built
    from ``params``.  The relative error of each entry uses the denominator
    ``max(|analytic|, |numeric|, 1e-8)``.  ``max_entries`` caps the number of
    probed entries per parameter (chosen by a fixed-seed permutation).
    """
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("grad_check needs float64 parameters")
        p.grad = None
    loss = f()
    _scalar(loss)
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    indices = None
    if max_entries is not None:
        picker = np.random.default_rng(seed)
        indices = [picker.permutation(p.size)[:max_entries] for p in params]
    numeric = numeric_grad(f, params, step, indices)

    worst = 0.0
    for k, (a, n) in enumerate(zip(analytic, numeric)):
        a, n = a.reshape(-1), n.reshape(-1)
        if indices is not None:
            a, n = a[indices[k]], n[indices[k]]
        if a.size == 0:
            continue
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
