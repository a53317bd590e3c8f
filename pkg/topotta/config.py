"""
Configuration settings for the TopoTTA desk toolkit.

A run is described by one flat mapping of ``key: value`` pairs. Defaults
live in ``DEFAULT_CONFIG``; a YAML file and command-line overrides are
layered on top and the merged mapping is split into the typed sections
used by the library.
"""
import os
from dataclasses import dataclass, field, asdict
from typing import Any, Dict, Iterable, Optional, Tuple

import yaml

from topotta.errors import DataIOError, InvalidArgumentError

CONFIG_FILE_NAME = "run-config.yaml"

# Direction presets for the router; 0 stands for the central difference.
DIRECTION_SETS = {
    "all": (1, 2, 3, 4, 5, 6, 7, 8),
    "central": (0,),
    "orthogonal": (2, 4, 5, 7),
    "diagonal": (1, 3, 6, 8),
}

HG_VARIANTS = ("frequency-swap", "blur", "noise", "image-swap")
BACKGROUND_STRATEGIES = ("neighbor", "least-similar", "median-similar", "most-similar")
STAGE1_SCOPES = ("router", "all")

# Default configuration
DEFAULT_CONFIG = {
    "seed": 0,
    # model
    "levels": 3,
    "base_channels": 8,
    "image_size": 128,
    # source training
    "epochs": 30,
    "batch_size": 4,
    "lr_source": 5e-4,
    "val_fraction": 0.1,
    "train_images": 200,
    "test_images": 20,
    "source_domain": "source",
    "target_domain": "shifted",
    # adaptation
    "iterations": 6,
    "lr_stage1": 0.01,
    "lr_stage2": 1e-4,
    "adam_beta1": 0.9,
    "adam_beta2": 0.999,
    "adam_eps": 1e-8,
    "ema_rate": 0.999,
    "teacher_rounds": 4,
    "student_rounds": 1,
    "scales": [0.5, 1.0, 1.25, 1.5],
    "continual": True,
    "binarize_threshold": 0.5,
    "log_eps": 1e-7,
    "grid_n": 4,
    "direction_set": "all",
    "stage1_enabled": True,
    "stage2_enabled": True,
    "stage1_scope": "router",
    # hard sample generation
    "tau": 0.95,
    "k": 0.002,
    "window": 30,
    "tau_bg": 0.05,
    "low_freq_ratio": 0.3,
    "variant": "frequency-swap",
    "background_strategy": "neighbor",
    "blur_sigma": 2.0,
    "noise_sigma": 0.2,
    # metrics
    "betti_patch": None,
}


def _check(condition, message):
    if not condition:
        raise InvalidArgumentError(message)


@dataclass
class ModelConfig:
    """Shape of the segmentation network."""

    levels: int = 3
    base_channels: int = 8
    image_size: int = 128

    def validate(self):
        _check(self.levels >= 1, f"levels must be >= 1, got {self.levels}")
        _check(self.base_channels >= 1, f"base_channels must be >= 1, got {self.base_channels}")
        _check(
            self.image_size % (2 ** self.levels) == 0,
            f"image_size {self.image_size} is not divisible by 2**levels = {2 ** self.levels}",
        )


@dataclass
class TrainConfig:
    """Source-domain training recipe."""

    epochs: int = 30
    batch_size: int = 4
    lr_source: float = 5e-4
    val_fraction: float = 0.1

    def validate(self):
        _check(self.epochs >= 1, f"epochs must be >= 1, got {self.epochs}")
        _check(self.batch_size >= 1, f"batch_size must be >= 1, got {self.batch_size}")
        _check(0 < self.lr_source <= 1, f"lr_source must be in (0, 1], got {self.lr_source}")
        _check(0 < self.val_fraction < 1, f"val_fraction must be in (0, 1), got {self.val_fraction}")


@dataclass
class HgConfig:
    """Settings of the pseudo-break hard sample generator."""

    tau: float = 0.95
    k: float = 0.002
    window: int = 30
    tau_bg: float = 0.05
    low_freq_ratio: float = 0.3
    variant: str = "frequency-swap"
    background_strategy: str = "neighbor"
    blur_sigma: float = 2.0
    noise_sigma: float = 0.2

    def validate(self):
        _check(0 < self.tau < 1, f"tau must be in (0, 1), got {self.tau}")
        _check(0 < self.k <= 1, f"k must be in (0, 1], got {self.k}")
        _check(self.window >= 3, f"window must be >= 3, got {self.window}")
        _check(0 <= self.tau_bg < 1, f"tau_bg must be in [0, 1), got {self.tau_bg}")
        _check(
            0 < self.low_freq_ratio < 1,
            f"low_freq_ratio must be in (0, 1), got {self.low_freq_ratio}",
        )
        _check(self.variant in HG_VARIANTS, f"unknown variant {self.variant!r}")
        _check(
            self.background_strategy in BACKGROUND_STRATEGIES,
            f"unknown background_strategy {self.background_strategy!r}",
        )
        _check(self.blur_sigma >= 0, f"blur_sigma must be >= 0, got {self.blur_sigma}")
        _check(self.noise_sigma >= 0, f"noise_sigma must be >= 0, got {self.noise_sigma}")


@dataclass
class AdaptConfig:
    """Settings of the two-stage adaptation loop."""

    iterations: int = 6
    lr_stage1: float = 0.01
    lr_stage2: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    ema_rate: float = 0.999
    teacher_rounds: int = 4
    student_rounds: int = 1
    scales: Tuple[float, ...] = (0.5, 1.0, 1.25, 1.5)
    continual: bool = True
    binarize_threshold: float = 0.5
    log_eps: float = 1e-7
    grid_n: int = 4
    direction_set: str = "all"
    stage1_enabled: bool = True
    stage2_enabled: bool = True
    stage1_scope: str = "router"

    def __post_init__(self):
        self.scales = tuple(float(s) for s in self.scales)

    @property
    def steps_per_stage(self) -> int:
        return self.iterations // 2

    @property
    def directions(self) -> Tuple[int, ...]:
        return DIRECTION_SETS[self.direction_set]

    def validate(self):
        _check(
            self.iterations >= 2 and self.iterations % 2 == 0,
            f"iterations must be even and >= 2, got {self.iterations}",
        )
        # zero rates are accepted so the no-update baselines stay expressible
        for name in ("lr_stage1", "lr_stage2"):
            value = getattr(self, name)
            _check(0 <= value <= 1, f"{name} must be in [0, 1], got {value}")
        _check(0 <= self.ema_rate <= 1, f"ema_rate must be in [0, 1], got {self.ema_rate}")
        _check(0 <= self.adam_beta1 < 1, f"adam_beta1 must be in [0, 1), got {self.adam_beta1}")
        _check(0 <= self.adam_beta2 < 1, f"adam_beta2 must be in [0, 1), got {self.adam_beta2}")
        _check(self.adam_eps > 0, f"adam_eps must be > 0, got {self.adam_eps}")
        _check(self.teacher_rounds >= 1, f"teacher_rounds must be >= 1, got {self.teacher_rounds}")
        _check(self.student_rounds >= 1, f"student_rounds must be >= 1, got {self.student_rounds}")
        _check(len(self.scales) > 0, "scales must not be empty")
        _check(all(s > 0 for s in self.scales), f"scales must be positive, got {self.scales}")
        _check(
            0 < self.binarize_threshold < 1,
            f"binarize_threshold must be in (0, 1), got {self.binarize_threshold}",
        )
        _check(0 < self.log_eps < 0.5, f"log_eps must be in (0, 0.5), got {self.log_eps}")
        _check(self.grid_n >= 1, f"grid_n must be >= 1, got {self.grid_n}")
        _check(self.direction_set in DIRECTION_SETS, f"unknown direction_set {self.direction_set!r}")
        _check(self.stage1_scope in STAGE1_SCOPES, f"unknown stage1_scope {self.stage1_scope!r}")


@dataclass
class RunConfig:
    """Merged configuration of one command invocation."""

    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    hg: HgConfig = field(default_factory=HgConfig)
    train_images: int = 200
    test_images: int = 20
    source_domain: str = "source"
    target_domain: str = "shifted"
    betti_patch: Optional[int] = None

    def validate(self):
        _check(self.train_images >= 1, f"train_images must be >= 1, got {self.train_images}")
        _check(self.test_images >= 1, f"test_images must be >= 1, got {self.test_images}")
        _check(
            self.betti_patch is None or self.betti_patch >= 1,
            f"betti_patch must be >= 1 when set, got {self.betti_patch}",
        )
        self.model.validate()
        self.train.validate()
        self.adapt.validate()
        self.hg.validate()
        return self

    def to_flat(self) -> Dict[str, Any]:
        """Return the flat ``key: value`` mapping this configuration came from."""
        flat = {
            "seed": self.seed,
            "train_images": self.train_images,
            "test_images": self.test_images,
            "source_domain": self.source_domain,
            "target_domain": self.target_domain,
            "betti_patch": self.betti_patch,
        }
        for section in (self.model, self.train, self.adapt, self.hg):
            flat.update(asdict(section))
        flat["scales"] = list(self.adapt.scales)
        return flat


_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "adapt": AdaptConfig,
    "hg": HgConfig,
}


def build_run_config(values: Dict[str, Any]) -> RunConfig:
    """Split a flat mapping into a validated ``RunConfig``.

    Args:
        values (Dict[str, Any]): Flat mapping; missing keys take their defaults.

    Returns:
        RunConfig: The validated configuration.

    Raises:
        InvalidArgumentError: If a key is unknown or a value breaks an invariant.
    """
    unknown = sorted(set(values) - set(DEFAULT_CONFIG))
    if unknown:
        raise InvalidArgumentError(f"unknown configuration key(s): {', '.join(unknown)}")

    merged = dict(DEFAULT_CONFIG)
    merged.update(values)

    sections = {}
    for name, cls in _SECTIONS.items():
        keys = cls.__dataclass_fields__.keys()
        try:
            sections[name] = cls(**{key: merged[key] for key in keys})
        except (TypeError, ValueError) as e:
            raise InvalidArgumentError(f"invalid value in section {name}: {e}")

    top_level = {
        key: merged[key]
        for key in RunConfig.__dataclass_fields__
        if key not in _SECTIONS
    }
    return RunConfig(**top_level, **sections).validate()


def parse_overrides(pairs: Iterable[str]) -> Dict[str, Any]:
    """Parse ``KEY=VALUE`` command-line overrides; values are read as YAML scalars."""
    overrides = {}
    for pair in pairs:
        if "=" not in pair:
            raise InvalidArgumentError(f"override {pair!r} is not of the form KEY=VALUE")
        key, raw = pair.split("=", 1)
        overrides[key.strip()] = yaml.safe_load(raw)
    return overrides


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Load configuration from a YAML file and apply overrides.

    Args:
        path (str, optional): Flat YAML mapping. Defaults are used when omitted.
        overrides (Dict[str, Any], optional): Values applied after the file.

    Returns:
        RunConfig: The merged and validated configuration.

    Raises:
        DataIOError: If the file cannot be read.
        InvalidArgumentError: If the file is not a flat mapping or holds unknown keys.
    """
    values = {}
    if path is not None:
        if not os.path.exists(path):
            raise DataIOError("config file not found", path)
        with open(path, "r") as f:
            loaded = yaml.safe_load(f) or {}
        if not isinstance(loaded, dict):
            raise InvalidArgumentError(f"config file {path} must hold a key: value mapping")
        values.update(loaded)
    values.update(overrides or {})
    return build_run_config(values)


def ensure_output_dir(path):
    """Ensure an output directory exists."""
    os.makedirs(path, exist_ok=True)


def save_config(config: RunConfig, directory):
    """Save the effective configuration next to a command's outputs."""
    ensure_output_dir(directory)

    with open(os.path.join(directory, CONFIG_FILE_NAME), "w") as f:
        yaml.safe_dump(config.to_flat(), f, sort_keys=True)
