"""Plain-text run configuration: bracketed sections of key = value lines.

Every key has a default, unknown sections or keys are rejected, and the
parsed configuration serializes back to a nested dict so checkpoints can
echo the exact experiment settings.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field

from .data import CropPolicy, SyntheticSpec
from .encoding import (
    AGG_MEAN,
    AGG_NORMALIZED,
    SMOOTHING_PER_COMPONENT,
    SMOOTHING_SHARED,
)
from .frontend import ConvSpec, StageSpec
from .train import ENCODER_LDE, ENCODER_TAP, SgdConfig


class ConfigError(ValueError):
    """Configuration file is invalid."""


@dataclass
class FrontendSettings:
    enabled: bool = True
    stages: str = "16:1:down,32:1:down"
    kernel: int = 3
    activation: str = "relu"

    def parse_stages(self) -> list[StageSpec]:
        out = []
        for chunk in self.stages.split(","):
            parts = chunk.strip().split(":")
            if len(parts) != 3 or parts[2] not in ("down", "flat"):
                raise ConfigError(
                    f"bad stage {chunk!r}: expected channels:blocks:down|flat")
            try:
                channels, blocks = int(parts[0]), int(parts[1])
            except ValueError as exc:
                raise ConfigError(f"bad stage {chunk!r}: {exc}") from exc
            out.append(StageSpec(channels=channels, blocks=blocks,
                                 downsample=parts[2] == "down"))
        return out

    def build(self, in_dim: int) -> ConvSpec | None:
        """Concrete front-end spec for a corpus feature dimension."""
        if not self.enabled:
            return None
        try:
            return ConvSpec(in_dim=in_dim, stages=self.parse_stages(),
                            kernel=self.kernel, activation=self.activation)
        except ValueError as exc:
            raise ConfigError(f"bad frontend settings: {exc}") from exc


@dataclass
class EncoderSettings:
    model: str = ENCODER_TAP
    components: int = 8
    smoothing: str = SMOOTHING_PER_COMPONENT
    beta: float = 1.0
    aggregation: str = AGG_MEAN
    length_normalize: bool = True
    freeze_dictionary: bool = False
    zero_dictionary: bool = False

    def __post_init__(self):
        if self.model not in (ENCODER_TAP, ENCODER_LDE):
            raise ConfigError(f"unknown encoder model {self.model!r}")
        if self.smoothing not in (SMOOTHING_SHARED, SMOOTHING_PER_COMPONENT):
            raise ConfigError(f"unknown smoothing mode {self.smoothing!r}")
        if self.aggregation not in (AGG_MEAN, AGG_NORMALIZED):
            raise ConfigError(f"unknown aggregation mode {self.aggregation!r}")
        if self.components < 1:
            raise ConfigError("components must be >= 1")


@dataclass
class TrainSettings:
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 30
    batch_size: int = 32
    crop_min: int = 200
    crop_max: int = 1000
    smooth_window: int = 400
    seed: int = 0

    def sgd(self) -> SgdConfig:
        """The full-budget recipe compressed to the configured epochs."""
        try:
            return SgdConfig(lr0=self.lr0, momentum=self.momentum,
                             weight_decay=self.weight_decay,
                             ).scaled(self.epochs)
        except ValueError as exc:
            raise ConfigError(f"bad train settings: {exc}") from exc

    def crop(self) -> CropPolicy:
        try:
            return CropPolicy(self.crop_min, self.crop_max)
        except ValueError as exc:
            raise ConfigError(f"bad crop range: {exc}") from exc


@dataclass
class GmmSettings:
    components: int = 16
    iterations: int = 20
    seed: int = 0
    use_sdc: bool = True
    sdc_coeffs: int = 7
    sdc_delta: int = 1
    sdc_shift: int = 3
    sdc_blocks: int = 7
    sdc_static: bool = True
    max_frames_per_class: int = 50000  # 0 keeps every frame

    def __post_init__(self):
        if self.components < 1 or self.iterations < 1:
            raise ConfigError("components and iterations must be >= 1")
        if self.max_frames_per_class < 0:
            raise ConfigError("max_frames_per_class must be >= 0")


@dataclass
class PathSettings:
    train_corpus: str = "data/train.bin"
    test_corpus: str = "data/test.bin"
    checkpoint: str = "runs/model.ckpt"
    loss_log: str = "runs/loss.log"
    scores: str = "runs/scores.txt"
    gmm_checkpoint: str = "runs/gmm.ckpt"
    gmm_scores: str = "runs/gmm_scores.txt"


@dataclass
class RunConfig:
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    frontend: FrontendSettings = field(default_factory=FrontendSettings)
    encoder: EncoderSettings = field(default_factory=EncoderSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    gmm: GmmSettings = field(default_factory=GmmSettings)
    paths: PathSettings = field(default_factory=PathSettings)


def _to_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


# section -> key -> (attribute, converter); attribute names match the
# dataclass fields so sections can be built generically
_SCHEMA = {
    "data": {
        "num_classes": int, "feature_dim": int, "phones_per_class": int,
        "min_len": int, "max_len": int, "noise_std": float,
        "separation": float, "self_loop": float, "train_utterances": int,
        "test_utterances": int, "bucketed_test": _to_bool, "seed": int,
    },
    "frontend": {
        "enabled": _to_bool, "stages": str, "kernel": int, "activation": str,
    },
    "encoder": {
        "model": str, "components": int, "smoothing": str, "beta": float,
        "aggregation": str, "length_normalize": _to_bool,
        "freeze_dictionary": _to_bool, "zero_dictionary": _to_bool,
    },
    "train": {
        "lr0": float, "momentum": float, "weight_decay": float,
        "epochs": int, "batch_size": int, "crop_min": int, "crop_max": int,
        "smooth_window": int, "seed": int,
    },
    "gmm": {
        "components": int, "iterations": int, "seed": int,
        "use_sdc": _to_bool, "sdc_coeffs": int, "sdc_delta": int,
        "sdc_shift": int, "sdc_blocks": int, "sdc_static": _to_bool,
        "max_frames_per_class": int,
    },
    "paths": {
        "train_corpus": str, "test_corpus": str, "checkpoint": str,
        "loss_log": str, "scores": str, "gmm_checkpoint": str,
        "gmm_scores": str,
    },
}

_BUILDERS = {
    "data": SyntheticSpec, "frontend": FrontendSettings,
    "encoder": EncoderSettings, "train": TrainSettings,
    "gmm": GmmSettings, "paths": PathSettings,
}


def parse_config(text: str, origin: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=origin)
    except configparser.Error as exc:
        raise ConfigError(f"{origin}: {exc}") from exc

    overrides = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            known = ", ".join(sorted(_SCHEMA))
            raise ConfigError(f"{origin}: unknown section [{section}] "
                              f"(known: {known})")
        keys = _SCHEMA[section]
        values = {}
        for key, raw in parser.items(section):
            if key not in keys:
                known = ", ".join(sorted(keys))
                raise ConfigError(f"{origin}: unknown key {key!r} in "
                                  f"[{section}] (known: {known})")
            try:
                values[key] = keys[key](raw)
            except ValueError as exc:
                raise ConfigError(
                    f"{origin}: bad value for {key!r} in [{section}]: "
                    f"{exc}") from exc
        overrides[section] = values

    built = {}
    for section, builder in _BUILDERS.items():
        try:
            built[section] = builder(**overrides.get(section, {}))
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"{origin}: invalid [{section}]: {exc}") from exc
    rc = RunConfig(**built)
    # surface stage-syntax errors at parse time, not at model build
    if rc.frontend.enabled:
        rc.frontend.parse_stages()
    return rc


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, origin=str(path))


def config_to_dict(rc: RunConfig) -> dict:
    """Typed nested dict of every setting, for checkpoint echo."""
    out = {}
    for section, keys in _SCHEMA.items():
        holder = getattr(rc, section)
        out[section] = {key: getattr(holder, key) for key in keys}
    return out
