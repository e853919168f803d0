"""Central finite-difference check of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst_index: Optional[tuple] = None
    message: str = ""
    analytic: np.ndarray = field(default=None, repr=False)
    numeric: np.ndarray = field(default=None, repr=False)


def _scalar(out: Tensor) -> float:
    if out.data.size != 1:
        raise ValueError(f"grad_check: function must return a scalar, got shape {out.shape}")
    return float(out.data.reshape(()))


def numerical_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    base = np.array(x, dtype=np.float64)
    grad = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        orig = base[idx]
        base[idx] = orig + h
        fp = _scalar(f(Tensor(base.copy())))
        base[idx] = orig - h
        fm = _scalar(f(Tensor(base.copy())))
        base[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(idx)
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def grad_check(
    f: Callable[[Tensor], Tensor],
    x,
    tol: float = 1e-4,
    h: float = 1e-5,
) -> GradCheckReport:
    """Compare the reverse-mode gradient of ``f`` at ``x`` with central differences.

    The error at each coordinate is ``|a - n| / max(1, |a|, |n|)``, i.e.
    relative for large gradients and absolute near zero. The check passes iff
    the maximum over coordinates is at most ``tol``.
    """
    data = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(data.copy(), requires_grad=True)
    out = f(leaf)
    value = _scalar(out)
    if not np.isfinite(value):
        return GradCheckReport(False, float("inf"), None, "non-finite value at the base point")
    out.backward()
    analytic = leaf.grad
    try:
        numeric = numerical_gradient(f, data, h)
    except FloatingPointError as exc:
        idx = exc.args[0]
        return GradCheckReport(False, float("inf"), idx, f"non-finite value while probing coordinate {idx}")
    if not np.all(np.isfinite(analytic)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(analytic))[0])
        return GradCheckReport(False, float("inf"), bad, f"non-finite analytic gradient at {bad}")
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    if err.size == 0:
        return GradCheckReport(True, 0.0, None, "empty input", analytic, numeric)
    worst = np.unravel_index(int(np.argmax(err)), err.shape)
    max_err = float(err[worst])
    passed = max_err <= tol
    msg = f"max rel error {max_err:.3e} at {tuple(int(i) for i in worst)} (tol {tol:g})"
    return GradCheckReport(passed, max_err, tuple(int(i) for i in worst), msg, analytic, numeric)
