"""Incremental recursive erasing with trust coefficients.

During a training forward the localizer is applied repeatedly to a working
copy of each image. Every trusted step adds its mask to a running max
accumulator, adds the step's secondary-loss gradient to the localizer
parameters and erases the accumulated region from the working copy. A sample
stops as soon as one step is untrusted; the batch stops when every sample has
stopped or ``u + 1`` forwards were made.

Samples of a batch are processed together at each step (only the still
active ones are forwarded). Gradients of per-sample losses add up, so this is
equivalent to the per-sample loop.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .autograd import ops
from .autograd.tensor import backward
from .config import HyperConfig
from .losses import loss_secondary
from .masks import masks_from_stack


class ErasingError(RuntimeError):
    pass


@dataclass
class StepRecord:
    sample_id: str
    t: int
    psi: float
    gamma: float
    h_t: float
    h_0: float
    pred: int
    label: int
    trusted: bool


@dataclass
class ErasingResult:
    masks: np.ndarray
    localizer_grads: Dict[str, np.ndarray]
    steps: List[StepRecord] = field(default_factory=list)
    forwards: np.ndarray = None
    l_sec: np.ndarray = None


def compute_trust(
    t: int, p_hat_s: np.ndarray, y: int, h_t: float, h_0: float, sigma: float
) -> Tuple[float, float]:
    """Return ``(psi, gamma)`` for one sample at step ``t``.

    ``gamma`` is the true-class probability when the prediction is correct
    (argmax, lowest index on ties) and the loss did not grow past the t=0
    loss, else 0. ``psi = exp(-t / sigma) * gamma``.
    """
    if sigma <= 0:
        raise ValueError(f"compute_trust: sigma must be > 0, got {sigma}")
    if t < 0:
        raise ValueError(f"compute_trust: step must be >= 0, got {t}")
    p = np.asarray(p_hat_s, dtype=np.float64)
    gamma = float(p[y]) if (int(np.argmax(p)) == y and h_t <= h_0) else 0.0
    return math.exp(-t / sigma) * gamma, gamma


def accumulate_mask(r_star_plus: np.ndarray, r_plus_t: np.ndarray, psi: float) -> np.ndarray:
    """Elementwise ``max(r_star_plus, psi * r_plus_t)``."""
    if r_star_plus.shape != r_plus_t.shape:
        raise ValueError(f"accumulate_mask: shapes {r_star_plus.shape} and {r_plus_t.shape} differ")
    if not 0 <= psi <= 1:
        raise ValueError(f"accumulate_mask: psi must be in [0, 1], got {psi}")
    return np.maximum(r_star_plus, psi * r_plus_t)


def run_recursive_erasing(
    model,
    images: np.ndarray,
    labels: Sequence[int],
    cfg: Optional[HyperConfig] = None,
    rng: Optional[np.random.Generator] = None,
    ids: Optional[Sequence[str]] = None,
) -> ErasingResult:
    """Mine and accumulate masks for a batch, accumulating localizer gradients in place.

    Gradients are added to the parameters' ``.grad`` (not normalized by the
    batch size) and a copy of the localizer gradients is returned. The t=0
    secondary loss always contributes; later steps contribute only if
    trusted.
    """
    cfg = cfg or model.cfg
    if cfg.u < 0:
        raise ValueError(f"run_recursive_erasing: u must be >= 0, got {cfg.u}")
    images = np.asarray(images)
    labels = np.asarray(labels, dtype=int)
    n, _, h, w = images.shape
    ids = [str(i) for i in (ids if ids is not None else range(n))]

    x_star = images.copy()
    acc = np.zeros((n, h, w), dtype=images.dtype)
    h0 = np.zeros(n)
    l_sec = np.zeros(n)
    forwards = np.zeros(n, dtype=int)
    active = np.arange(n)
    steps: List[StepRecord] = []

    for t in range(cfg.u + 1):
        if active.size == 0:
            break
        ya = labels[active]
        stack = model.localizer(x_star[active], train_mode=True, rng=rng)
        forwards[active] += 1
        r_t = masks_from_stack(stack, h, w, cfg.omega, cfg.sigma_prime).data
        h_t = loss_secondary(stack.scores, ya)
        if not np.all(np.isfinite(h_t.data)):
            raise ErasingError(f"non-finite secondary loss at erasing step {t}")
        if t == 0:
            h0[active] = h_t.data
        p_s = stack.scores.data
        trust = [compute_trust(t, p_s[j], ya[j], h_t.data[j], h0[i], cfg.sigma) for j, i in enumerate(active)]
        psi = np.array([tr[0] for tr in trust])
        trusted = psi != 0

        contrib = np.ones(active.size, dtype=bool) if t == 0 else trusted
        if contrib.any():
            if contrib.all():
                loss = ops.sum(h_t)
            else:
                loss = ops.sum(ops.mul(h_t, contrib.astype(h_t.dtype)))
            if cfg.w_sec != 1.0:
                loss = ops.affine(loss, cfg.w_sec)
            backward(loss)
            l_sec[active[contrib]] += h_t.data[contrib]

        preds = p_s.argmax(axis=1)
        for j, i in enumerate(active):
            steps.append(
                StepRecord(ids[i], t, float(psi[j]), float(trust[j][1]), float(h_t.data[j]), float(h0[i]),
                           int(preds[j]), int(ya[j]), bool(trusted[j]))
            )
            if trusted[j]:
                acc[i] = accumulate_mask(acc[i], r_t[j], psi[j])
                x_star[i] = x_star[i] * (1.0 - acc[i])[None]
        active = active[trusted]

    loc_grads = {k: p.grad.copy() for k, p in model.localizer_parameters().items()}
    return ErasingResult(acc, loc_grads, steps, forwards, l_sec)


STEP_FIELDS = ["sample_id", "t", "psi", "gamma", "h_t", "h_0", "pred", "label", "trusted"]


def write_step_log(path: Union[str, Path], records: Sequence[StepRecord], extra: Optional[dict] = None) -> None:
    """Append step records to a CSV (header written on first use)."""
    path = Path(path)
    extra = extra or {}
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(extra) + STEP_FIELDS)
        if new:
            writer.writeheader()
        for rec in records:
            row = dict(extra)
            row.update(asdict(rec))
            writer.writerow(row)
