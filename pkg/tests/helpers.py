"""Shared test oracles: central finite differences for gradient checks.

Error metric: |analytic - numeric| / max(1, |analytic|, |numeric|), with
step h = 1e-5 * max(1, |x|) per element. The scale floor keeps positions
with a legitimately zero gradient (masked paths, gates at zero) from
dividing by zero while still exposing any real gradient bug at O(1).
"""

from __future__ import annotations

import numpy as np

from ausculta.tensor import Tensor, backward, zero_grads


def numeric_grad(f, t: Tensor) -> np.ndarray:
    """Central-difference gradient of scalar-valued f() w.r.t. tensor t."""
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        x0 = flat[i]
        h = 1e-5 * max(1.0, abs(x0))
        flat[i] = x0 + h
        fp = float(f().data)
        flat[i] = x0 - h
        fm = float(f().data)
        flat[i] = x0
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / scale))


def check_grads(f, params: list[Tensor], tol: float = 1e-4) -> float:
    """Assert analytic grads of scalar f() match finite differences."""
    zero_grads(params)
    loss = f()
    backward(loss)
    worst = 0.0
    for p in params:
        assert p.grad is not None, f"no gradient reached {p.name or p.shape}"
        err = rel_err(p.grad, numeric_grad(f, p))
        worst = max(worst, err)
        assert err < tol, f"grad mismatch for {p.name or p.shape}: rel err {err:.3e}"
    zero_grads(params)
    return worst
