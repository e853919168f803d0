"""Conditional-entropy utilities and the three training loss terms.

All losses accept a probability tensor of shape (c,) or (n, c) and return a
scalar or a per-sample vector (n,) respectively; batch reduction happens in
``total_loss``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .autograd import LOG_EPS, ShapeError, Tensor, as_tensor
from .autograd import ops


def _check_distribution(p: Tensor, op: str) -> None:
    if p.ndim not in (1, 2):
        raise ShapeError(f"{op}: expected shape (c,) or (n, c), got {p.shape}")
    d = p.data
    if not np.all(np.isfinite(d)) or np.any(d < 0) or np.any(np.abs(d.sum(axis=-1) - 1.0) > 1e-6):
        raise ValueError(f"{op}: input is not a probability distribution")


def _check_labels(y, n_rows: Optional[int], c: int, op: str) -> np.ndarray:
    y = np.asarray(y, dtype=int)
    if np.any(y < 0) or np.any(y >= c):
        raise ValueError(f"{op}: label out of range [0, {c})")
    if n_rows is not None and y.shape != (n_rows,):
        raise ShapeError(f"{op}: labels shape {y.shape} does not match batch of {n_rows}")
    return y


def entropy(p_hat) -> Tensor:
    """``-sum p log p`` with ``0 log 0 = 0``."""
    p = as_tensor(p_hat)
    _check_distribution(p, "entropy")
    return ops.affine(ops.sum(ops.mul(p, ops.log(p)), axis=-1), -1.0)


def loss_positive(p_hat, y) -> Tensor:
    """Negative log-likelihood ``-log p[y]`` with the probability clamped at ``LOG_EPS``."""
    p = as_tensor(p_hat)
    _check_distribution(p, "loss_positive")
    c = p.shape[-1]
    if p.ndim == 1:
        y = _check_labels(y, None, c, "loss_positive")
        picked = ops.pick(ops.reshape(p, (1, c)), np.reshape(y, (1,)))
        return ops.reshape(ops.affine(ops.log(picked), -1.0), ())
    y = _check_labels(y, p.shape[0], c, "loss_positive")
    return ops.affine(ops.log(ops.pick(p, y)), -1.0)


def loss_negative(p_hat, c: Optional[int] = None) -> Tensor:
    """Cross-entropy against the uniform distribution: ``-(1/c) sum_y log p[y]``."""
    p = as_tensor(p_hat)
    _check_distribution(p, "loss_negative")
    if c is not None and c != p.shape[-1]:
        raise ShapeError(f"loss_negative: class count {c} != distribution width {p.shape[-1]}")
    return ops.affine(ops.mean(ops.log(p), axis=-1), -1.0)


def loss_secondary(p_hat_s, y) -> Tensor:
    """Same contract as ``loss_positive``, applied to the localizer's distribution."""
    return loss_positive(p_hat_s, y)


def total_loss(l_pos, l_neg, l_sec, weights=(1.0, 1.0, 1.0)) -> Tensor:
    """Weighted sum of the three terms, averaged over the batch."""
    terms = [ops.affine(as_tensor(t), float(w)) if w != 1.0 else as_tensor(t) for t, w in zip((l_pos, l_neg, l_sec), weights)]
    per_sample = ops.add(ops.add(terms[0], terms[1]), terms[2])
    return ops.mean(per_sample)


@dataclass
class LossBundle:
    l_pos: float
    l_neg: float
    l_sec: float
    total: float
    per_sample: List[dict] = field(default_factory=list)

    @classmethod
    def from_terms(cls, l_pos: np.ndarray, l_neg: np.ndarray, l_sec: np.ndarray, ids=None) -> "LossBundle":
        l_pos, l_neg, l_sec = (np.asarray(a, dtype=np.float64).reshape(-1) for a in (l_pos, l_neg, l_sec))
        ids = list(ids) if ids is not None else list(range(len(l_pos)))
        rows = [
            {"id": i, "l_pos": float(a), "l_neg": float(b), "l_sec": float(s), "total": float(a + b + s)}
            for i, a, b, s in zip(ids, l_pos, l_neg, l_sec)
        ]
        mp, mn, ms = float(l_pos.mean()), float(l_neg.mean()), float(l_sec.mean())
        return cls(mp, mn, ms, float((l_pos + l_neg + l_sec).mean()), rows)


def uniform_floor(c: int) -> float:
    """Minimum of ``loss_negative`` over distributions on ``c`` classes."""
    return math.log(c)


__all__ = [
    "LOG_EPS",
    "LossBundle",
    "entropy",
    "loss_negative",
    "loss_positive",
    "loss_secondary",
    "total_loss",
    "uniform_floor",
]
