"""Weakly supervised object localization from image labels: low entropy on the
masked-in region, high entropy on the rest,
with recursive erasing, on a small numpy autodiff engine."""

from .config import ConfigError, HyperConfig
from .data import SampleRecord, SynthSpec, gen_synthetic, load_folder
from .metrics import MetricsReport, all_ones_baseline, f1_scores
from .nets import WSLModel
from .training import evaluate, fit, infer

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "HyperConfig",
    "MetricsReport",
    "SampleRecord",
    "SynthSpec",
    "WSLModel",
    "all_ones_baseline",
    "evaluate",
    "f1_scores",
    "fit",
    "gen_synthetic",
    "infer",
    "load_folder",
]
