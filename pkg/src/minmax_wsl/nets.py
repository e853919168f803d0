"""Localizer and classifier networks on a small shared convolutional backbone."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from .autograd import ShapeError, Tensor, as_tensor
from .autograd import ops
from .config import HyperConfig

CHECKPOINT_FORMAT = "minmax-wsl-checkpoint/1"


@dataclass
class ActivationStack:
    """Per-class spatial maps ``maps`` (n, c, h', w') and the score distribution ``scores`` (n, c)."""

    maps: Tensor
    scores: Tensor
    logits: Tensor


def _kaiming(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape).astype(dtype)
    return Tensor(w, requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def pool_count(fraction: float, n: int) -> int:
    # tolerance keeps e.g. 0.07 * 100 from rounding up to 8
    return max(1, math.ceil(fraction * n - 1e-9))


def wildcat_pool(maps, kmax: float, kmin: float, alpha: float) -> Tensor:
    """Class score per map: mean of the top ``kmax`` fraction of activations
    plus ``alpha`` times the mean of the bottom ``kmin`` fraction.

    Operates over the two trailing axes; leading axes are kept.
    """
    maps = as_tensor(maps)
    if maps.ndim < 2 or maps.shape[-1] * maps.shape[-2] == 0:
        raise ShapeError(f"wildcat_pool: need a non-empty 2-D map, got shape {maps.shape}")
    if not (0 < kmax <= 1 and 0 < kmin <= 1):
        raise ValueError(f"wildcat_pool: kmax={kmax}, kmin={kmin} must lie in (0, 1]")
    n = maps.shape[-1] * maps.shape[-2]
    flat = ops.reshape(maps, maps.shape[:-2] + (n,))
    score = ops.top_k_mean(flat, pool_count(kmax, n), largest=True)
    if alpha != 0:
        low = ops.top_k_mean(flat, pool_count(kmin, n), largest=False)
        score = ops.add(score, ops.affine(low, alpha))
    return score


def spatial_dropout(maps, rate: float, train_mode: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Zero each map location with probability ``rate`` and rescale survivors (training only)."""
    if not 0 <= rate < 1:
        raise ValueError(f"spatial_dropout: rate must be in [0, 1), got {rate}")
    maps = as_tensor(maps)
    if not train_mode or rate == 0:
        return maps
    if rng is None:
        raise ValueError("spatial_dropout: an rng is required in train mode")
    keep = rng.random(maps.shape) >= rate
    return ops.dropout_apply(maps, keep, 1.0 / (1.0 - rate))


class Backbone:
    """Stack of conv3x3 + relu blocks; strides multiply to the total downsampling."""

    def __init__(self, in_channels: int, channels, strides, rng: np.random.Generator, dtype=np.float32):
        self.in_channels = in_channels
        self.strides = tuple(strides)
        self.params: Dict[str, Tensor] = {}
        prev = in_channels
        for i, ch in enumerate(channels):
            self.params[f"conv{i}.weight"] = _kaiming(rng, (ch, prev, 3, 3), prev * 9, dtype)
            self.params[f"conv{i}.bias"] = _zeros((ch,), dtype)
            prev = ch
        self.out_channels = prev

    @property
    def stride(self) -> int:
        return int(np.prod(self.strides))

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"backbone: expected (n, {self.in_channels}, h, w) input, got shape {x.shape}")
        if min(x.shape[2:]) < self.stride:
            raise ShapeError(f"backbone: spatial size {x.shape[2:]} smaller than stride {self.stride}")
        h = x
        for i, s in enumerate(self.strides):
            h = ops.relu(ops.conv2d(h, self.params[f"conv{i}.weight"], self.params[f"conv{i}.bias"], s, 1))
        return h


class Localizer:
    """Fully convolutional localizer: backbone + 1x1 conv emitting ``modalities`` maps per class."""

    def __init__(self, backbone: Backbone, cfg: HyperConfig, rng: np.random.Generator):
        self.backbone = backbone
        self.cfg = cfg
        c, m = cfg.num_classes, cfg.modalities
        fan_in = backbone.out_channels
        self.head = {
            "weight": _kaiming(rng, (c * m, fan_in, 1, 1), fan_in, cfg.dtype),
            "bias": _zeros((c * m,), cfg.dtype),
        }
        self.forward_count = 0

    def __call__(self, x, train_mode: bool = False, rng: Optional[np.random.Generator] = None) -> ActivationStack:
        cfg = self.cfg
        feat = self.backbone(x)
        out = ops.conv2d(feat, self.head["weight"], self.head["bias"])
        n, _, hh, ww = out.shape
        maps = ops.mean(ops.reshape(out, (n, cfg.num_classes, cfg.modalities, hh, ww)), axis=2)
        pooled = spatial_dropout(maps, cfg.dropout, train_mode, rng)
        logits = wildcat_pool(pooled, cfg.kmax, cfg.kmin, cfg.alpha)
        self.forward_count += n
        return ActivationStack(maps=maps, scores=ops.softmax(logits, axis=-1), logits=logits)


class Classifier:
    """Backbone + global average pooling + linear layer to class probabilities."""

    def __init__(self, backbone: Backbone, cfg: HyperConfig, rng: np.random.Generator):
        self.backbone = backbone
        self.cfg = cfg
        fan_in = backbone.out_channels
        w = rng.normal(0.0, math.sqrt(1.0 / fan_in), size=(cfg.num_classes, fan_in)).astype(cfg.dtype)
        self.head = {"weight": Tensor(w, requires_grad=True), "bias": _zeros((cfg.num_classes,), cfg.dtype)}
        self.forward_count = 0

    def logits(self, x) -> Tensor:
        feat = self.backbone(x)
        self.forward_count += feat.shape[0]
        return ops.linear(ops.spatial_avg(feat), self.head["weight"], self.head["bias"])

    def __call__(self, x) -> Tensor:
        return ops.softmax(self.logits(x), axis=-1)


class WSLModel:
    """Localizer M and classifier C, optionally sharing one backbone."""

    def __init__(self, cfg: HyperConfig, seed: Optional[int] = None):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        loc_backbone = Backbone(cfg.in_channels, cfg.channels, cfg.strides, rng, cfg.dtype)
        if cfg.shared_backbone:
            cls_backbone = loc_backbone
        else:
            cls_backbone = Backbone(cfg.in_channels, cfg.channels, cfg.strides, rng, cfg.dtype)
        self.localizer = Localizer(loc_backbone, cfg, rng)
        self.classifier = Classifier(cls_backbone, cfg, rng)

    def localizer_parameters(self) -> Dict[str, Tensor]:
        prefix = "backbone" if self.cfg.shared_backbone else "loc_backbone"
        out = {f"{prefix}.{k}": v for k, v in self.localizer.backbone.params.items()}
        out.update({f"loc_head.{k}": v for k, v in self.localizer.head.items()})
        return out

    def classifier_parameters(self) -> Dict[str, Tensor]:
        prefix = "backbone" if self.cfg.shared_backbone else "cls_backbone"
        out = {f"{prefix}.{k}": v for k, v in self.classifier.backbone.params.items()}
        out.update({f"cls_head.{k}": v for k, v in self.classifier.head.items()})
        return out

    def parameters(self) -> Dict[str, Tensor]:
        out = dict(self.localizer_parameters())
        out.update(self.classifier_parameters())
        return out

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise ValueError(f"checkpoint is missing parameters: {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype)

    def save(self, path: Union[str, Path]) -> None:
        """Write weights + config as an uncompressed npz with little-endian arrays."""
        arrays = {f"param/{k}": v.astype(v.dtype.newbyteorder("<")) for k, v in self.state_dict().items()}
        arrays["meta/format"] = np.array(CHECKPOINT_FORMAT)
        arrays["meta/config"] = np.array(json.dumps(self.cfg.to_dict(), sort_keys=True))
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as fh:
            np.savez(fh, **arrays)
        tmp.replace(path)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "WSLModel":
        with np.load(path, allow_pickle=False) as data:
            fmt = str(data["meta/format"])
            if fmt != CHECKPOINT_FORMAT:
                raise ValueError(f"{path}: unsupported checkpoint format {fmt!r}")
            cfg_dict = json.loads(str(data["meta/config"]))
            for key in ("channels", "strides", "augment"):
                cfg_dict[key] = tuple(cfg_dict[key])
            cfg = HyperConfig.from_dict(cfg_dict)
            state = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
        model = cls(cfg)
        model.load_state_dict(state)
        return model
