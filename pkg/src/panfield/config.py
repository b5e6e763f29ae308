"""Training configuration: a sectioned key=value file with every key mirrored on the CLI."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .encoding import EncodingConfig
from .errors import LoadError, ParseError, ValidationError
from .field import FieldConfig
from .supervision import FeatureExtractor, LossWeights


@dataclass
class TrainConfig:
    # data
    dataset: str = ""
    holdout_every: int = 11
    # train
    iterations: int = 1500
    patch_size: int = 32
    patches_per_step: int = 2
    n_samples: int = 48
    seed: int = 0
    checkpoint_every: int = 0
    cascade: bool = True
    assign_every: int = 250
    assign_warmup: str = "25,50,100,150"
    assign_pixels: int = 512
    skip_threshold: float = 1e-3
    und_to_density: str = "non-void"
    log_every: int = 50
    # loss
    alpha_distill: float = 1.2
    alpha_sem: float = 0.1
    alpha_ins: float = 0.1
    alpha_seg: float = 0.12
    alpha_feat: float = 0.2
    alpha_reg: float = 0.001
    charbonnier_eps: float = 1e-4
    seg_max_groups: int = 1
    # optim
    lr_grid: float = 5e-3
    lr_decoder: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-10
    # model
    geo_resolutions: str = "16,32,64,128"
    geo_features: int = 2
    sem_resolution: int = 16
    sem_features: int = 1
    bound: float = 2.0
    geo_freqs: int = 2
    sem_freqs: int = 4
    sh_degree: int = 2
    geo_width: int = 64
    geo_feature_dim: int = 15
    app_width: int = 64
    sem_width: int = 64
    coarse_levels: int = 2
    # extractor
    extractor: str = "random-conv"
    extractor_seed: int = 0
    extractor_channels: str = "16,32,32"
    extractor_kernel: int = 4
    extractor_stride: int = 2
    extractor_min: int = 32

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.iterations < 0:
            raise ValidationError("iterations must be >= 0")
        for k in ("patch_size", "patches_per_step", "n_samples", "assign_every", "assign_pixels"):
            if getattr(self, k) < 1:
                raise ValidationError(f"{k} must be >= 1")
        for k in ("lr_grid", "lr_decoder", "adam_eps"):
            if not getattr(self, k) > 0:
                raise ValidationError(f"{k} must be positive")
        for k in ("beta1", "beta2"):
            if not 0 < getattr(self, k) < 1:
                raise ValidationError(f"{k} must lie in (0, 1)")
        if self.und_to_density not in ("joint", "non-void", "none"):
            raise ValidationError(f"und_to_density must be joint, non-void or none, got {self.und_to_density!r}")
        self.loss_weights()
        self.resolutions()

    # -------------------------------------------------------- derived objects

    def resolutions(self):
        return _int_list(self.geo_resolutions, "geo_resolutions")

    def warmup_steps(self):
        return set(_int_list(self.assign_warmup, "assign_warmup")) if self.assign_warmup.strip() else set()

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha_distill, self.alpha_sem, self.alpha_ins, self.alpha_seg,
                           self.alpha_feat, self.alpha_reg, self.charbonnier_eps)

    def field_config(self, n_classes: int, n_instances: int) -> FieldConfig:
        enc = EncodingConfig(
            geo_resolutions=tuple(self.resolutions()),
            geo_features=self.geo_features,
            bound=self.bound,
            sem_resolution=self.sem_resolution,
            sem_features=self.sem_features,
            geo_freqs=self.geo_freqs,
            sem_freqs=self.sem_freqs,
            sh_degree=self.sh_degree,
        )
        return FieldConfig(
            n_classes=n_classes,
            n_instances=n_instances,
            encoding=enc,
            geo_width=self.geo_width,
            geo_feature_dim=self.geo_feature_dim,
            app_width=self.app_width,
            sem_width=self.sem_width,
            coarse_levels=self.coarse_levels if self.cascade else 0,
        )

    def feature_extractor(self) -> FeatureExtractor:
        return FeatureExtractor(
            self.extractor,
            self.extractor_seed,
            tuple(_int_list(self.extractor_channels, "extractor_channels")),
            self.extractor_kernel,
            self.extractor_stride,
            self.extractor_min,
        )

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


SECTIONS = {
    "data": ("dataset", "holdout_every"),
    "train": ("iterations", "patch_size", "patches_per_step", "n_samples", "seed", "checkpoint_every", "cascade",
              "assign_every", "assign_warmup", "assign_pixels", "skip_threshold", "und_to_density", "log_every"),
    "loss": ("alpha_distill", "alpha_sem", "alpha_ins", "alpha_seg", "alpha_feat", "alpha_reg",
             "charbonnier_eps", "seg_max_groups"),
    "optim": ("lr_grid", "lr_decoder", "beta1", "beta2", "adam_eps"),
    "model": ("geo_resolutions", "geo_features", "sem_resolution", "sem_features", "bound", "geo_freqs",
              "sem_freqs", "sh_degree", "geo_width", "geo_feature_dim", "app_width", "sem_width", "coarse_levels"),
    "extractor": ("extractor", "extractor_seed", "extractor_channels", "extractor_kernel", "extractor_stride",
                  "extractor_min"),
}

FIELD_TYPES = {f.name: type(f.default) for f in fields(TrainConfig)}


def _int_list(text: str, key: str):
    try:
        return [int(v) for v in str(text).replace(" ", "").split(",") if v]
    except ValueError:
        raise ParseError(f"{key}: expected a comma-separated integer list, got {text!r}") from None


def parse_value(key: str, text: str):
    kind = FIELD_TYPES.get(key)
    if kind is None:
        raise ParseError(f"unknown config key {key!r}")
    text = str(text).strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        raise ParseError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None


def format_value(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_config_file(path) -> dict:
    """Raw key -> value overrides from a sectioned config file."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise LoadError(f"cannot read config {path}: {exc}") from exc
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ParseError(f"{path}: {exc}") from exc
    out = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            if key not in FIELD_TYPES:
                raise ParseError(f"{path}: unknown key {key!r} in [{section}]")
            out[key] = parse_value(key, value)
    return out


def build_config(file_values=None, overrides=None) -> TrainConfig:
    """Defaults, then file values, then explicit overrides (CLI wins)."""
    values = {}
    values.update(file_values or {})
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return TrainConfig(**values)


def config_text(cfg: TrainConfig) -> str:
    lines = []
    for section, keys in SECTIONS.items():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {format_value(getattr(cfg, k))}" for k in keys)
        lines.append("")
    return "\n".join(lines)


def config_items(cfg: TrainConfig):
    return [(k, format_value(getattr(cfg, k))) for keys in SECTIONS.values() for k in keys]
