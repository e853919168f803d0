"""Relevance-mask construction: class-map aggregation, detached upscaling,
sigmoid pseudo-thresholding, complement and masking of images."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autograd import NonFiniteError, ShapeError, Tensor, as_tensor
from .autograd import ops
from .nets import ActivationStack

BINARY_THRESHOLD = 0.5


def binarize(mask: np.ndarray, threshold: float = BINARY_THRESHOLD) -> np.ndarray:
    return (np.asarray(mask) >= threshold).astype(np.uint8)


@dataclass
class PseudoMask:
    """Soft foreground mask ``r_plus`` in [0, 1] and its complement."""

    r_plus: np.ndarray
    source: str = "single-pass"

    @property
    def r_minus(self) -> np.ndarray:
        return 1.0 - self.r_plus

    def binarize(self, threshold: float = BINARY_THRESHOLD) -> np.ndarray:
        return binarize(self.r_plus, threshold)

    def binary_pair(self, threshold: float = BINARY_THRESHOLD):
        """Binary foreground/background masks; they always partition the grid."""
        m_plus = self.binarize(threshold)
        return m_plus, (1 - m_plus).astype(np.uint8)


def aggregate_maps(stack: ActivationStack) -> Tensor:
    """Score-weighted sum of the class maps: ``T = sum_k p_s[k] * A[k]``.

    Accepts batched stacks (n, c, h', w') or single (c, h', w').
    """
    maps, scores = stack.maps, stack.scores
    if maps.ndim == 3:
        maps = ops.reshape(maps, (1,) + maps.shape)
        scores = ops.reshape(scores, (1,) + scores.shape)
        return ops.reshape(aggregate_maps(ActivationStack(maps, scores, stack.logits)), maps.shape[2:])
    if maps.ndim != 4 or scores.shape != maps.shape[:2]:
        raise ShapeError(f"aggregate_maps: maps shape {maps.shape} incompatible with scores shape {scores.shape}")
    weights = ops.reshape(scores, scores.shape + (1, 1))
    return ops.sum(ops.mul(weights, maps), axis=1)


def upscale(t, out_h: int, out_w: int) -> Tensor:
    """Detached align-corners bilinear upscaling of the aggregated map."""
    return ops.bilinear_upsample(t, out_h, out_w, detach=True)


def pseudo_threshold(t_up, omega: float, sigma_prime: float) -> Tensor:
    """``1 / (1 + exp(-omega * (t_up - sigma_prime)))``."""
    if omega <= 0:
        raise ValueError(f"pseudo_threshold: omega must be > 0, got {omega}")
    t_up = as_tensor(t_up)
    if not np.all(np.isfinite(t_up.data)):
        raise NonFiniteError("pseudo_threshold: non-finite upscaled map")
    return ops.sigmoid(ops.affine(t_up, omega, -omega * sigma_prime))


def complement(r_plus):
    """``1 - r_plus``; keeps Tensor/ndarray type of the input."""
    if isinstance(r_plus, Tensor):
        return ops.affine(r_plus, -1.0, 1.0)
    return 1.0 - np.asarray(r_plus)


def apply_mask(x, r):
    """Hadamard product of images (n, d, h, w) or (d, h, w) with masks broadcast over channels.

    Works on Tensors (differentiable through both factors) or plain arrays.
    """
    xs = x.shape
    rs = r.shape
    batched = len(xs) == 4
    expect = (xs[0],) + xs[2:] if batched else xs[1:]
    if len(xs) not in (3, 4) or tuple(rs) != tuple(expect):
        raise ShapeError(f"apply_mask: image shape {tuple(xs)} incompatible with mask shape {tuple(rs)}")
    if isinstance(x, Tensor) or isinstance(r, Tensor):
        rr = ops.reshape(as_tensor(r), (rs[0], 1) + tuple(rs[1:]) if batched else (1,) + tuple(rs))
        return ops.mul(as_tensor(x), rr)
    r = np.asarray(r)
    return np.asarray(x) * (r[:, None] if batched else r[None])


def masks_from_stack(stack: ActivationStack, out_h: int, out_w: int, omega: float, sigma_prime: float) -> Tensor:
    """Full mask pipeline: aggregate, detached upscale, pseudo-threshold."""
    t = aggregate_maps(stack)
    return pseudo_threshold(upscale(t, out_h, out_w), omega, sigma_prime)


def predict_mask(model, x: np.ndarray, cfg=None) -> tuple:
    """Single inference forward: returns (soft masks (n, h, w), score distribution (n, c))."""
    cfg = cfg or model.cfg
    stack = model.localizer(x, train_mode=False)
    r = masks_from_stack(stack, x.shape[2], x.shape[3], cfg.omega, cfg.sigma_prime)
    return r.data, stack.scores.data


def pseudo_mask(r_plus: np.ndarray, source: Optional[str] = None) -> PseudoMask:
    return PseudoMask(np.asarray(r_plus), source or "single-pass")
