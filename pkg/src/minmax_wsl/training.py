"""Training loop, evaluation and prediction."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .autograd import ops
from .autograd.tensor import backward
from .config import HyperConfig
from .data import (
    SampleRecord,
    hash_directory,
    iterate_batches,
    load_folder,
    make_splits,
    normalize,
    save_png,
    write_manifest,
)
from .erasing import ErasingResult, run_recursive_erasing, write_step_log
from .losses import LossBundle, loss_negative, loss_positive
from .masks import apply_mask, masks_from_stack
from .metrics import (
    MetricsReport,
    all_ones_baseline,
    evaluate_predictions,
    write_metrics_csv,
    write_pr_csv,
)
from .nets import WSLModel

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class SGD:
    """SGD with (Nesterov) momentum; weight decay applies to ``*.weight`` parameters only."""

    def __init__(self, params: Dict[str, "object"], momentum: float = 0.9, nesterov: bool = True,
                 weight_decay: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.nesterov = nesterov
        self.weight_decay = weight_decay
        self.buffers: Dict[str, np.ndarray] = {}

    def step(self, lr: float) -> None:
        mu = self.momentum
        for name, p in self.params.items():
            g = p.grad
            if self.weight_decay and name.endswith("weight"):
                g = g + self.weight_decay * p.data
            if mu:
                buf = self.buffers.get(name)
                buf = g.copy() if buf is None else mu * buf + g
                self.buffers[name] = buf
                g = g + mu * buf if self.nesterov else buf
            p.data = (p.data - lr * g).astype(p.dtype)


@dataclass
class StepOutput:
    losses: LossBundle
    erasing: ErasingResult


def train_step(
    model: WSLModel,
    x: np.ndarray,
    y: np.ndarray,
    cfg: HyperConfig,
    rng: np.random.Generator,
    optimizer: Optional[SGD] = None,
    lr: Optional[float] = None,
    ids: Optional[Sequence[str]] = None,
) -> StepOutput:
    """One mini-batch: recursive erasing on M, then C on the masked images.

    Gradients of all three terms are summed over samples, divided by the batch
    size and applied with ``optimizer`` when given.
    """
    n = x.shape[0]
    model.zero_grad()
    er = run_recursive_erasing(model, x, y, cfg, rng, ids)

    acc = er.masks.astype(x.dtype)
    p_pos = model.classifier(apply_mask(x, acc))
    l_pos = loss_positive(p_pos, y)
    p_neg = model.classifier(apply_mask(x, 1.0 - acc))
    l_neg = loss_negative(p_neg)
    cls_loss = ops.add(ops.affine(ops.sum(l_pos), cfg.w_pos), ops.affine(ops.sum(l_neg), cfg.w_neg))
    if not np.isfinite(cls_loss.data).all():
        raise TrainingError("non-finite classifier loss")
    backward(cls_loss)

    for p in model.parameters().values():
        if p._grad is not None:
            p._grad = p._grad / n
    if optimizer is not None:
        optimizer.step(cfg.lr if lr is None else lr)
    bundle = LossBundle.from_terms(l_pos.data, l_neg.data, er.l_sec, ids)
    return StepOutput(bundle, er)


@dataclass
class Inference:
    masks: np.ndarray  # (n, h, w) soft foreground masks
    probs: np.ndarray  # classifier distribution on the masked images
    scores: np.ndarray  # localizer distribution

    @property
    def preds(self) -> np.ndarray:
        return self.probs.argmax(axis=1)


def infer(model: WSLModel, x: np.ndarray) -> Inference:
    """Inference forward: one localizer pass (no erasing), then C on ``x * mask``."""
    cfg = model.cfg
    stack = model.localizer(x, train_mode=False)
    r = masks_from_stack(stack, x.shape[2], x.shape[3], cfg.omega, cfg.sigma_prime).data
    probs = model.classifier(apply_mask(x, r.astype(x.dtype))).data
    return Inference(r, probs, stack.scores.data)


def evaluate(model: WSLModel, records: Sequence[SampleRecord], batch_size: int = 32,
             with_pr: bool = True) -> Tuple[MetricsReport, np.ndarray]:
    """Metrics over ``records``; returns the report and the soft masks."""
    if not records:
        raise ValueError("evaluate: empty dataset")
    ids, labels, preds, masks, gts = [], [], [], [], []
    for x, y, bid, bm in iterate_batches(records, batch_size, dtype=model.cfg.dtype):
        if x.shape[1] != model.cfg.in_channels:
            raise ValueError(f"evaluate: images have {x.shape[1]} channels, model expects {model.cfg.in_channels}")
        out = infer(model, x)
        ids += bid
        labels += list(y)
        preds += list(out.preds)
        masks += list(out.masks)
        gts += bm
    report = evaluate_predictions(ids, labels, preds, masks, gts, with_pr=with_pr)
    return report, np.stack(masks)


# -- full runs --------------------------------------------------------------------


@dataclass
class TrainResult:
    model: WSLModel
    best_epoch: int
    history: List[dict] = field(default_factory=list)
    checkpoint: Optional[Path] = None
    manifest: Optional[dict] = None


def load_training_data(cfg: HyperConfig, out_dir: Optional[Path]) -> Tuple[List[SampleRecord], List[SampleRecord], dict]:
    """Resolve ``cfg.data_dir``: use ``train/`` + ``valid/`` when both exist,
    otherwise split ``train/`` (or the root itself) with a stratified 80/20 split."""
    root = Path(cfg.data_dir)
    if not cfg.data_dir or not root.is_dir():
        raise FileNotFoundError(f"data_dir {cfg.data_dir!r} is not a directory")
    info: dict = {"data_dir": str(root), "data_hash": hash_directory(root)}
    size = cfg.image_size
    if (root / "train").is_dir() and (root / "valid").is_dir():
        train = load_folder(root / "train", size=size, channels=cfg.in_channels)
        valid = load_folder(root / "valid", size=size, channels=cfg.in_channels)
        if out_dir is not None:
            write_manifest(out_dir / "train.txt", train)
            write_manifest(out_dir / "valid.txt", valid)
    else:
        base = root / "train" if (root / "train").is_dir() else root
        records = load_folder(base, size=size, channels=cfg.in_channels)
        train, valid = make_splits(records, (1 - cfg.valid_fraction, cfg.valid_fraction), cfg.seed, out_dir)
    info["n_train"], info["n_valid"] = len(train), len(valid)
    return train, valid, info


def fit(
    cfg: HyperConfig,
    train: Sequence[SampleRecord],
    valid: Sequence[SampleRecord],
    out_dir: Optional[Union[str, Path]] = None,
    log_erasing: bool = False,
    data_info: Optional[dict] = None,
    progress: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Train with early stopping on validation classification error.

    Ties in validation error go to the later epoch. The best weights are kept
    in memory and, with ``out_dir``, written to ``best.ckpt`` with a
    ``manifest.json`` describing the run.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        step_log = out / "erasing_steps.csv"
        if log_erasing and step_log.exists():
            step_log.unlink()
    model = WSLModel(cfg)
    opt = SGD(model.parameters(), cfg.momentum, cfg.nesterov, cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 1])
    best_err, best_epoch, best_state = np.inf, -1, None
    history: List[dict] = []
    since_best = 0
    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        lr = cfg.lr_at(epoch)
        sums = np.zeros(4)
        max_fw, n_seen = 0, 0
        fw_total = 0
        for b, (x, y, ids, _) in enumerate(iterate_batches(train, cfg.batch_size, rng, True, cfg.augment, cfg.dtype)):
            try:
                st = train_step(model, x, y, cfg, rng, opt, lr, ids)
            except Exception as exc:
                raise TrainingError(f"epoch {epoch} batch {b}: {exc}") from exc
            lb = st.losses
            sums += np.array([lb.l_pos, lb.l_neg, lb.l_sec, lb.total]) * len(y)
            max_fw = max(max_fw, int(st.erasing.forwards.max()))
            fw_total += int(st.erasing.forwards.sum())
            n_seen += len(y)
            if log_erasing and out is not None:
                write_step_log(out / "erasing_steps.csv", st.erasing.steps, {"epoch": epoch, "batch": b})
        report, _ = evaluate(model, valid, with_pr=False)
        rec = {
            "epoch": epoch,
            "lr": lr,
            "loss_pos": sums[0] / n_seen,
            "loss_neg": sums[1] / n_seen,
            "loss_sec": sums[2] / n_seen,
            "loss_total": sums[3] / n_seen,
            "max_localizer_forwards_per_sample": max_fw,
            "mean_localizer_forwards_per_sample": fw_total / n_seen,
            "valid_error": report.classification_error,
            "valid_f1_plus": report.f1_plus,
            "valid_f1_minus": report.f1_minus,
            "seconds": time.perf_counter() - t0,
        }
        if report.classification_error <= best_err:
            best_err, best_epoch = report.classification_error, epoch
            best_state = model.state_dict()
            since_best = 0
        else:
            since_best += 1
        rec["best_epoch"] = best_epoch
        history.append(rec)
        log.info(
            "epoch %d lr %.2g loss %.4f (pos %.4f neg %.4f sec %.4f) valid err %.2f f1+ %s f1- %s [%.1fs]",
            epoch, lr, rec["loss_total"], rec["loss_pos"], rec["loss_neg"], rec["loss_sec"],
            rec["valid_error"], _pct(rec["valid_f1_plus"]), _pct(rec["valid_f1_minus"]), rec["seconds"],
        )
        if progress is not None:
            progress(rec)
        if cfg.patience and since_best > cfg.patience:
            break

    model.load_state_dict(best_state)
    result = TrainResult(model, best_epoch, history)
    if out is not None:
        ckpt = out / "best.ckpt"
        try:
            model.save(ckpt)
        except OSError as exc:
            raise TrainingError(f"could not write checkpoint {ckpt}: {exc}") from exc
        manifest = {
            "config": cfg.to_dict(),
            "seed": cfg.seed,
            "data": data_info or {},
            "splits": {"train": str(out / "train.txt"), "valid": str(out / "valid.txt")},
            "history": history,
            "best_epoch": best_epoch,
            "best_valid_error": best_err,
            "checkpoints": {"best": str(ckpt)},
        }
        if not (out / "train.txt").exists():
            write_manifest(out / "train.txt", train)
            write_manifest(out / "valid.txt", valid)
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=_json_default))
        result.checkpoint, result.manifest = ckpt, manifest
    return result


def _pct(v) -> str:
    return "-" if v is None else f"{v:.2f}"


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(type(o))


def write_eval_outputs(out_dir: Union[str, Path], report: MetricsReport, baseline: Optional[Tuple[float, float]]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", report)
    if report.pr_curve_fg is not None:
        write_pr_csv(out / "pr_fg.csv", report.pr_curve_fg)
    if report.pr_curve_bg is not None:
        write_pr_csv(out / "pr_bg.csv", report.pr_curve_bg)
    summary = {
        "n": len(report.rows),
        "classification_error": report.classification_error,
        "f1_plus": report.f1_plus,
        "f1_minus": report.f1_minus,
        "pixel_metrics": report.f1_plus is not None,
        "all_ones_f1_plus": None if baseline is None else baseline[0],
        "all_ones_f1_minus": None if baseline is None else baseline[1],
        "pr_skipped_fg": report.skipped_fg,
        "pr_skipped_bg": report.skipped_bg,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))


def run_eval(model: WSLModel, records: Sequence[SampleRecord], out_dir: Union[str, Path]) -> MetricsReport:
    before = model.localizer.forward_count
    report, _ = evaluate(model, records)
    if model.localizer.forward_count - before != len(records):
        raise TrainingError("inference made more than one localizer forward per image")
    gts = [r.gt_mask for r in records if r.gt_mask is not None]
    baseline = all_ones_baseline(gts) if gts else None
    write_eval_outputs(out_dir, report, baseline)
    return report


def predict_images(model: WSLModel, paths: Sequence[Union[str, Path]], out_dir: Union[str, Path],
                   class_names: Optional[Sequence[str]] = None) -> List[dict]:
    """Write ``<id>_mask.png`` (255 * soft mask), ``<id>_bin.png`` and ``labels.csv``."""
    from .data import _fit, read_image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = model.cfg
    rows = []
    for path in paths:
        path = Path(path)
        try:
            img = read_image(path, cfg.in_channels)
        except Exception as exc:
            log.warning("skipping unreadable image %s: %s", path, exc)
            continue
        img, _ = _fit(img, None, cfg.image_size)
        x = normalize(img)[None].astype(cfg.dtype)
        res = infer(model, x)
        soft = np.clip(np.round(res.masks[0] * 255.0), 0, 255).astype(np.uint8)
        binary = np.where(soft >= 128, 255, 0).astype(np.uint8)
        save_png(out / f"{path.stem}_mask.png", soft)
        save_png(out / f"{path.stem}_bin.png", binary)
        pred = int(res.preds[0])
        rows.append({
            "id": path.stem,
            "pred": pred,
            "class": class_names[pred] if class_names else str(pred),
            "confidence": float(res.probs[0, pred]),
        })
    with open(out / "labels.csv", "w") as fh:
        fh.write("id,pred,class,confidence\n")
        for r in rows:
            fh.write(f"{r['id']},{r['pred']},{r['class']},{r['confidence']:.6f}\n")
    return rows
