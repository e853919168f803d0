"""Command-line interface: ``train``, ``eval``, ``predict`` and ``synth``.

Exit status is 0 on success, 2 when a precondition is rejected (bad config,
missing data, incompatible checkpoint) and 1 when a run fails midway.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from .config import ConfigError, HyperConfig
from .data import SynthSpec, class_names, gen_synthetic, hash_directory, load_folder, save_dataset, write_manifest
from .nets import WSLModel
from .training import TrainingError, fit, load_training_data, predict_images, run_eval

log = logging.getLogger("minmax_wsl")

EXIT_FAILURE = 1
EXIT_REJECTED = 2


def cmd_train(args) -> int:
    cfg = HyperConfig.load(args.config)
    if args.data:
        cfg = cfg.replace(data_dir=str(args.data))
    out_dir = Path(args.out or cfg.out_dir or "run")
    out_dir.mkdir(parents=True, exist_ok=True)
    train, valid, info = load_training_data(cfg, out_dir)
    classes = info_classes(Path(cfg.data_dir))
    if len(classes) != cfg.num_classes:
        raise ConfigError(f"config num_classes={cfg.num_classes} but data has {len(classes)} classes {classes}")
    info["classes"] = classes
    log.info("training on %d images, validating on %d", len(train), len(valid))
    res = fit(cfg, train, valid, out_dir, log_erasing=args.log_erasing, data_info=info)
    print(f"best epoch {res.best_epoch}: valid error {res.manifest['best_valid_error']:.2f}%  -> {res.checkpoint}")
    return 0


def info_classes(root: Path) -> List[str]:
    base = root / "train" if (root / "train").is_dir() else root
    return class_names(base)


def _eval_root(data: Path) -> Path:
    return data / "test" if (data / "test").is_dir() else data


def cmd_eval(args) -> int:
    model = WSLModel.load(args.ckpt)
    root = _eval_root(Path(args.data))
    stats: dict = {}
    records = load_folder(root, size=model.cfg.image_size, channels=model.cfg.in_channels, stats=stats)
    if len(stats["classes"]) != model.cfg.num_classes:
        raise ConfigError(
            f"checkpoint has {model.cfg.num_classes} classes but {root} has {len(stats['classes'])}"
        )
    report = run_eval(model, records, args.out)
    line = f"error {report.classification_error:.2f}%"
    if report.f1_plus is not None:
        line += f"  F1+ {report.f1_plus:.2f}  F1- {report.f1_minus:.2f}"
    else:
        line += "  (no ground-truth masks: pixel metrics absent)"
    print(line)
    return 0


def cmd_predict(args) -> int:
    model = WSLModel.load(args.ckpt)
    rows = predict_images(model, args.images, args.out)
    print(f"wrote masks for {len(rows)} of {len(args.images)} images to {args.out}")
    return 0


def cmd_synth(args) -> int:
    spec = SynthSpec.load(args.spec) if args.spec else SynthSpec()
    out = Path(args.out)
    names = spec.class_names()
    for split, records in zip(("train", "valid", "test"), gen_synthetic(spec)):
        if not records:
            continue
        save_dataset(records, out / split, names)
        write_manifest(out / "splits" / f"{split}.txt", records)
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True))
    print(f"{out}: {spec.n_train}/{spec.n_valid}/{spec.n_test} images, content hash {hash_directory(out)[:16]}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="minmax-wsl", description="Weakly supervised localization toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a key=value config file")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--log-erasing", action="store_true", help="write erasing_steps.csv with one row per (sample, step)")
    p.add_argument("--data", type=Path, help="override data_dir from the config")
    p.add_argument("--out", type=Path, help="override out_dir from the config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset folder")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path, help="dataset root (uses its test/ split when present)")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write soft and binarized masks for images")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("images", nargs="+", type=Path)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("synth", help="generate the synthetic dataset")
    p.add_argument("--spec", type=Path, help="key=value spec file (defaults when omitted)")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s"
    )
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_REJECTED
    except (TrainingError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
