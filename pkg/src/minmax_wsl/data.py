"""Datasets: deterministic synthetic shapes-on-texture images with ground-truth
masks, image-folder ingestion, stratified splits, augmentation and
normalization.

On-disk layout (shared by ``synth`` output and ``load_folder`` input)::

    root/<class>/<id>.png     images, one subdirectory per class
    root/masks/<id>.png       optional binary masks ({0, 255}), matched by id

``masks`` is reserved and never treated as a class directory.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from .config import ConfigError, coerce, read_kv

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".bmp", ".ppm")
MASKS_DIR = "masks"
TEXTURES = ("hstripes", "vstripes", "checker", "dots")
SHAPES = ("ellipse", "rectangle", "cross")
# foreground tint per class index (RGB, before texture modulation)
PALETTE = (
    (0.30, 0.18, 0.55),
    (0.15, 0.50, 0.30),
    (0.60, 0.35, 0.10),
    (0.10, 0.30, 0.65),
    (0.55, 0.10, 0.25),
)


@dataclass
class SampleRecord:
    image: np.ndarray  # (d, h, w)
    label: int
    gt_mask: Optional[np.ndarray] = None  # (h, w) in {0, 1}
    id: str = ""

    def __post_init__(self):
        if self.gt_mask is not None and self.gt_mask.shape != self.image.shape[1:]:
            raise ValueError(
                f"sample {self.id}: mask shape {self.gt_mask.shape} does not match image shape {self.image.shape}"
            )


@dataclass
class SynthSpec:
    classes: Tuple[Tuple[str, str], ...] = (("hstripes", "ellipse"), ("checker", "rectangle"))
    image_size: int = 64
    instances_min: int = 1
    instances_max: int = 3
    size_min: int = 8
    size_max: int = 14
    background_mean: float = 0.72
    background_contrast: float = 0.12
    foreground: bool = True
    seed: int = 0
    n_train: int = 200
    n_valid: int = 50
    n_test: int = 100

    def __post_init__(self):
        self.classes = tuple(tuple(c) for c in self.classes)
        self.validate()

    def validate(self) -> None:
        if len(self.classes) < 2:
            raise ConfigError("synth spec needs at least 2 classes")
        if len(self.classes) > len(PALETTE):
            raise ConfigError(f"synth spec supports at most {len(PALETTE)} classes")
        if len(set(self.classes)) != len(self.classes):
            raise ConfigError("synth classes must be distinct (texture, shape) pairs")
        for tex, shape in self.classes:
            if tex not in TEXTURES:
                raise ConfigError(f"unknown texture {tex!r}; choose from {TEXTURES}")
            if shape not in SHAPES:
                raise ConfigError(f"unknown shape family {shape!r}; choose from {SHAPES}")
        if not 1 <= self.instances_min <= self.instances_max:
            raise ConfigError("need 1 <= instances_min <= instances_max")
        if not 2 <= self.size_min <= self.size_max:
            raise ConfigError("need 2 <= size_min <= size_max")
        if 2 * self.size_max + 1 > self.image_size:
            raise ConfigError(
                f"shape extent {2 * self.size_max + 1} px exceeds image size {self.image_size}"
            )
        if min(self.n_train, self.n_valid, self.n_test) < 0:
            raise ConfigError("split sizes must be >= 0")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def class_names(self) -> List[str]:
        return [f"{i}_{tex}_{shape}" for i, (tex, shape) in enumerate(self.classes)]

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SynthSpec":
        return cls(**coerce(cls, read_kv(path)))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# -- synthetic generation ------------------------------------------------------


def _smooth_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    """Bilinearly upsampled coarse gaussian noise, roughly unit variance."""
    coarse = rng.normal(size=(cells + 1, cells + 1))
    pos = np.linspace(0, cells, size)
    lo = np.minimum(np.floor(pos).astype(int), cells - 1)
    f = pos - lo
    rows = coarse[lo] * (1 - f)[:, None] + coarse[lo + 1] * f[:, None]
    return rows[:, lo] * (1 - f)[None] + rows[:, lo + 1] * f[None]


def _background(rng: np.random.Generator, spec: SynthSpec) -> np.ndarray:
    s = spec.image_size
    tint = np.array([1.0, 0.86, 0.95])[:, None, None]
    field = 0.7 * _smooth_noise(rng, s, 6) + 0.3 * rng.normal(size=(s, s))
    img = spec.background_mean * tint * (1.0 + spec.background_contrast * field[None])
    return img


def _texture(name: str, s: int, phase: int) -> np.ndarray:
    r, c = np.mgrid[0:s, 0:s]
    if name == "hstripes":
        return ((r + phase) // 2) % 2
    if name == "vstripes":
        return ((c + phase) // 2) % 2
    if name == "checker":
        return (((r + phase) // 3) + ((c + phase) // 3)) % 2
    return (((r + phase) % 4) < 2) & (((c + phase) % 4) < 2)


def _shape_mask(shape: str, s: int, cy: float, cx: float, ay: float, ax: float, rng) -> np.ndarray:
    r, c = np.mgrid[0:s, 0:s]
    dy, dx = r - cy, c - cx
    if shape == "ellipse":
        return (dy / ay) ** 2 + (dx / ax) ** 2 <= 1.0
    if shape == "rectangle":
        return (np.abs(dy) <= ay) & (np.abs(dx) <= ax)
    arm = max(2.0, min(ay, ax) * rng.uniform(0.35, 0.5))
    return ((np.abs(dy) <= ay) & (np.abs(dx) <= arm)) | ((np.abs(dx) <= ax) & (np.abs(dy) <= arm))


def _render(rng: np.random.Generator, spec: SynthSpec, label: int) -> Tuple[np.ndarray, np.ndarray]:
    s = spec.image_size
    img = _background(rng, spec)
    mask = np.zeros((s, s), dtype=bool)
    if spec.foreground:
        tex, shape = spec.classes[label]
        color = np.array(PALETTE[label])[:, None, None]
        k = int(rng.integers(spec.instances_min, spec.instances_max + 1))
        for _ in range(k):
            ay = float(rng.uniform(spec.size_min, spec.size_max))
            ax = float(rng.uniform(spec.size_min, spec.size_max))
            cy = float(rng.uniform(ay, s - 1 - ay))
            cx = float(rng.uniform(ax, s - 1 - ax))
            mask |= _shape_mask(shape, s, cy, cx, ay, ax, rng)
        pattern = _texture(tex, s, int(rng.integers(0, 4)))
        shade = 1.0 + 0.06 * rng.normal(size=(s, s))
        fg = color * (0.55 + 0.9 * pattern)[None] * shade[None]
        img = np.where(mask[None], fg, img)
    return np.clip(img, 0.0, 1.0), mask.astype(np.uint8)


def _generate_split(spec: SynthSpec, n: int, split: str, split_idx: int) -> List[SampleRecord]:
    rng = np.random.default_rng([spec.seed, split_idx])
    labels = np.arange(n) % spec.num_classes
    rng.shuffle(labels)
    records = []
    for i, y in enumerate(labels):
        img, mask = _render(rng, spec, int(y))
        records.append(SampleRecord(img, int(y), mask, f"{split}_{i:05d}"))
    return records


def gen_synthetic(
    spec: SynthSpec, n_train: Optional[int] = None, n_valid: Optional[int] = None, n_test: Optional[int] = None
) -> Tuple[List[SampleRecord], List[SampleRecord], List[SampleRecord]]:
    """Generate train/valid/test splits; each split uses its own seeded stream."""
    sizes = (
        spec.n_train if n_train is None else n_train,
        spec.n_valid if n_valid is None else n_valid,
        spec.n_test if n_test is None else n_test,
    )
    return tuple(_generate_split(spec, n, name, i) for i, (n, name) in enumerate(zip(sizes, ("train", "valid", "test"))))


# -- disk I/O -----------------------------------------------------------------


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def save_png(path: Union[str, Path], arr: np.ndarray) -> None:
    """Write (d, h, w) float in [0, 1] or (h, w) uint8 as PNG."""
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    if arr.ndim == 3:
        arr = arr[0] if arr.shape[0] == 1 else np.transpose(arr, (1, 2, 0))
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def save_dataset(records: Sequence[SampleRecord], root: Union[str, Path], class_names: Sequence[str]) -> None:
    root = Path(root)
    for name in class_names:
        (root / name).mkdir(parents=True, exist_ok=True)
    if any(r.gt_mask is not None for r in records):
        (root / MASKS_DIR).mkdir(parents=True, exist_ok=True)
    for rec in records:
        save_png(root / class_names[rec.label] / f"{rec.id}.png", rec.image)
        if rec.gt_mask is not None:
            save_png(root / MASKS_DIR / f"{rec.id}.png", (rec.gt_mask * 255).astype(np.uint8))


def read_image(path: Union[str, Path], channels: int = 3) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB" if channels == 3 else "L")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr[None] if arr.ndim == 2 else np.transpose(arr, (2, 0, 1))


def read_mask(path: Union[str, Path]) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr >= 128).astype(np.uint8)


def _fit(img: np.ndarray, mask: Optional[np.ndarray], size: int):
    """Center-crop to a square then resize to ``size`` (bilinear image, nearest mask)."""
    _, h, w = img.shape
    if h == size and w == size:
        return img, mask
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    img = img[:, top : top + side, left : left + side]
    chans = [
        np.asarray(Image.fromarray(ch.astype(np.float32), mode="F").resize((size, size), Image.BILINEAR))
        for ch in img
    ]
    img = np.clip(np.stack(chans).astype(np.float64), 0.0, 1.0)
    if mask is not None:
        m = mask[top : top + side, left : left + side]
        mask = np.asarray(Image.fromarray(m * 255).resize((size, size), Image.NEAREST)) >= 128
        mask = mask.astype(np.uint8)
    return img, mask


def class_names(root: Union[str, Path]) -> List[str]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    return sorted(p.name for p in root.iterdir() if p.is_dir() and p.name != MASKS_DIR)


def load_folder(
    root: Union[str, Path],
    masks_root: Optional[Union[str, Path]] = None,
    size: Optional[int] = None,
    channels: int = 3,
    stats: Optional[dict] = None,
) -> List[SampleRecord]:
    """Load ``root/<class>/<id>.<ext>`` images; labels follow sorted class names.

    Masks are looked up as ``<masks_root>/<id>.png`` (default ``root/masks``)
    and thresholded at 128. Unreadable files are skipped with a warning and
    counted in ``stats["skipped"]``.
    """
    root = Path(root)
    names = class_names(root)
    if not names:
        raise ValueError(f"{root}: no class subdirectories")
    mroot = Path(masks_root) if masks_root is not None else root / MASKS_DIR
    records: List[SampleRecord] = []
    skipped = 0
    for label, name in enumerate(names):
        files = sorted(p for p in (root / name).iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
        if not files:
            raise ValueError(f"{root / name}: empty class directory")
        for f in files:
            try:
                img = read_image(f, channels)
            except Exception as exc:  # PIL raises several types for corrupt data
                log.warning("skipping unreadable image %s: %s", f, exc)
                skipped += 1
                continue
            mask = None
            mpath = mroot / f"{f.stem}.png"
            if mpath.exists():
                try:
                    mask = read_mask(mpath)
                except Exception as exc:
                    log.warning("ignoring unreadable mask %s: %s", mpath, exc)
                if mask is not None and mask.shape != img.shape[1:]:
                    log.warning("ignoring mask %s with shape %s for image %s", mpath, mask.shape, img.shape)
                    mask = None
            if size is not None:
                img, mask = _fit(img, mask, size)
            records.append(SampleRecord(img, label, mask, f.stem))
    if stats is not None:
        stats["skipped"] = skipped
        stats["classes"] = names
    return records


def hash_directory(root: Union[str, Path]) -> str:
    """SHA-256 over sorted relative paths and file contents."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(str(p.relative_to(root)).encode())
        h.update(b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()


# -- splits, augmentation, batching ----------------------------------------------


def make_splits(
    records: Sequence[SampleRecord],
    fractions: Tuple[float, float] = (0.8, 0.2),
    seed: int = 0,
    manifest_dir: Optional[Union[str, Path]] = None,
) -> Tuple[List[SampleRecord], List[SampleRecord]]:
    """Stratified train/valid split; manifests are written when ``manifest_dir`` is given."""
    if len(fractions) != 2 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) <= 0:
        raise ValueError(f"make_splits: fractions must be two positive numbers summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    by_class: Dict[int, List[SampleRecord]] = {}
    for r in records:
        by_class.setdefault(r.label, []).append(r)
    train, valid = [], []
    for label in sorted(by_class):
        group = sorted(by_class[label], key=lambda r: r.id)
        if len(group) < 2:
            raise ValueError(f"make_splits: class {label} has fewer than 2 samples")
        order = rng.permutation(len(group))
        n_train = min(max(int(round(fractions[0] * len(group))), 1), len(group) - 1)
        train += [group[i] for i in order[:n_train]]
        valid += [group[i] for i in order[n_train:]]
    train.sort(key=lambda r: r.id)
    valid.sort(key=lambda r: r.id)
    if manifest_dir is not None:
        write_manifest(Path(manifest_dir) / "train.txt", train)
        write_manifest(Path(manifest_dir) / "valid.txt", valid)
    return train, valid


def write_manifest(path: Union[str, Path], records: Sequence[SampleRecord]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("".join(f"{r.id}\n" for r in records))


def read_manifest(path: Union[str, Path]) -> List[str]:
    return [line.strip() for line in Path(path).read_text().splitlines() if line.strip()]


def normalize(img: np.ndarray) -> np.ndarray:
    """Per-channel ``(x - 0.5) / 0.5``."""
    return (img - 0.5) / 0.5


def _geometric(arr: np.ndarray, hflip: bool, vflip: bool, k: int) -> np.ndarray:
    if hflip:
        arr = arr[..., ::-1]
    if vflip:
        arr = arr[..., ::-1, :]
    if k:
        arr = np.rot90(arr, k, axes=(-2, -1))
    return np.ascontiguousarray(arr)


def augment_normalize(
    record: SampleRecord,
    ops: Sequence[str] = ("hflip", "vflip", "rot90"),
    train_mode: bool = True,
    rng: Optional[np.random.Generator] = None,
) -> SampleRecord:
    """Random flip/rot90 composition (train mode only, mask co-transformed) then normalization."""
    unknown = set(ops) - {"hflip", "vflip", "rot90"}
    if unknown:
        raise ValueError(f"augment_normalize: unsupported ops {sorted(unknown)}")
    img, mask = record.image, record.gt_mask
    if train_mode and ops:
        if rng is None:
            raise ValueError("augment_normalize: rng required in train mode")
        hflip = "hflip" in ops and bool(rng.integers(2))
        vflip = "vflip" in ops and bool(rng.integers(2))
        k = int(rng.integers(4)) if "rot90" in ops else 0
        img = _geometric(img, hflip, vflip, k)
        if mask is not None:
            mask = _geometric(mask, hflip, vflip, k)
    return SampleRecord(normalize(img), record.label, mask, record.id)


def iterate_batches(
    records: Sequence[SampleRecord],
    batch_size: int,
    rng: Optional[np.random.Generator] = None,
    train_mode: bool = False,
    ops: Sequence[str] = (),
    dtype=np.float32,
) -> Iterator[Tuple[np.ndarray, np.ndarray, List[str], List[Optional[np.ndarray]]]]:
    """Yield (images, labels, ids, masks); shuffled and augmented when ``train_mode``."""
    order = rng.permutation(len(records)) if train_mode else np.arange(len(records))
    for start in range(0, len(order), batch_size):
        batch = [
            augment_normalize(records[i], ops, train_mode, rng) for i in order[start : start + batch_size]
        ]
        x = np.stack([b.image for b in batch]).astype(dtype)
        y = np.array([b.label for b in batch], dtype=int)
        yield x, y, [b.id for b in batch], [b.gt_mask for b in batch]
