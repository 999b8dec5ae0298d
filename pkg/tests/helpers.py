"""Shared test utilities."""
from __future__ import annotations

import numpy as np

from ssmrl import autodiff as ad


def central_diff(loss_fn, param, idx, h: float | None = None) -> float:
    """Central finite difference of a scalar loss w.r.t. one entry."""
    flat = param.data.reshape(-1)
    if h is None:
        h = 1e-4 * max(1.0, abs(float(flat[idx])))
        if flat.dtype == np.float32:
            h = max(h, 1e-2)
    orig = flat[idx]
    flat[idx] = orig + h
    lp = loss_fn().item()
    flat[idx] = orig - h
    lm = loss_fn().item()
    flat[idx] = orig
    return (lp - lm) / (2.0 * h)


def gradcheck(loss_fn, params, rng, samples_per_param: int = 4,
              rtol: float = 1e-6, atol: float = 1e-9) -> float:
    """Compare analytic gradients against central differences.

    Returns the worst relative error; raises AssertionError above rtol.
    Meant to run under float64 (ad.use_dtype).
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    ad.backward(loss)
    worst = 0.0
    for p in params:
        if p.grad is None:
            raise AssertionError("parameter received no gradient")
        n = p.data.size
        idxs = rng.choice(n, size=min(samples_per_param, n), replace=False)
        for i in idxs:
            fd = central_diff(loss_fn, p, int(i))
            an = float(p.grad.reshape(-1)[int(i)])
            denom = max(abs(fd), abs(an))
            err = abs(fd - an) / denom if denom > atol else 0.0
            worst = max(worst, err)
            assert err <= rtol, f"grad mismatch: fd={fd:.8g} analytic={an:.8g} rel={err:.2e}"
    return worst
