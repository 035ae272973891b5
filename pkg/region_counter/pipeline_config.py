"""Versioned pipeline configuration.

A config file is a JSON document; every key is optional and falls back to
the package defaults. Command line flags are applied on top with
`PipelineConfig.override`.
"""

import dataclasses
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import orjson

from . import (
    ALPHA,
    BATCH_SIZE,
    CONFIG_VERSION,
    DENSITY_NORMALIZATION,
    DIVISION_MODE,
    HEIGHT_ANCHOR,
    LEARNING_RATE,
    M_MIN,
    MIN_CONFIDENCE,
    SEED,
    SIGMA_FACTOR,
    TRAIN_FRACTION,
    TRAIN_STEPS,
    WORKERS,
)
from .density import NORMALIZATIONS
from .detections import HEIGHT_ANCHORS, FrameGeometry
from .division import DIVISION_MODES
from .errors import ConfigError
from .idcnn import OPTIMIZERS, NetworkConfig
from .synth import SynthSettings
from .utils import json_dump


logger = logging.getLogger("regioncounter.pipeline_config")


@dataclass(frozen=True)
class Paths:
    frames_dir: Path | None = None
    detections: Path | None = None
    heads: Path | None = None
    output_dir: Path = Path("out")


@dataclass(frozen=True)
class TrainSettings:
    steps: int = TRAIN_STEPS
    learning_rate: float = LEARNING_RATE
    batch_size: int = BATCH_SIZE
    optimizer: str = "sgd"
    flip: bool = True
    train_fraction: float = TRAIN_FRACTION


@dataclass(frozen=True)
class PipelineConfig:
    version: int = CONFIG_VERSION
    scene_id: str = "scene"
    width: int | None = None
    height: int | None = None
    paths: Paths = field(default_factory=Paths)
    alpha: float = ALPHA
    min_confidence: float = MIN_CONFIDENCE
    mode: str = DIVISION_MODE
    anchor: str = HEIGHT_ANCHOR
    sigma_factor: float = SIGMA_FACTOR
    normalization: str = DENSITY_NORMALIZATION
    m_min: float = M_MIN
    false_color: bool = False
    network: NetworkConfig = field(default_factory=NetworkConfig)
    training: TrainSettings = field(default_factory=TrainSettings)
    synth: SynthSettings = field(default_factory=SynthSettings)
    seed: int = SEED
    workers: int = WORKERS

    @property
    def geometry(self) -> FrameGeometry:
        if self.width is None or self.height is None:
            raise ConfigError("Frame width and height must be configured")
        return FrameGeometry(self.width, self.height)

    def validate(self, *required: str) -> "PipelineConfig":
        """Check value ranges, and that every path named in `required`
        (attribute names of `Paths`) is set and exists.
        """
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"Unsupported config version {self.version}, expected {CONFIG_VERSION}")
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must be in (0, 1), got {self.alpha}")
        if not 0 <= self.min_confidence <= 1:
            raise ConfigError(f"min_confidence must be in [0, 1], got {self.min_confidence}")
        if self.mode not in DIVISION_MODES:
            raise ConfigError(f"mode must be one of {DIVISION_MODES}, got {self.mode!r}")
        if self.anchor not in HEIGHT_ANCHORS:
            raise ConfigError(f"anchor must be one of {HEIGHT_ANCHORS}, got {self.anchor!r}")
        if self.normalization not in NORMALIZATIONS:
            raise ConfigError(
                f"normalization must be one of {NORMALIZATIONS}, got {self.normalization!r}"
            )
        if not self.sigma_factor > 0 or not self.m_min > 0:
            raise ConfigError("sigma_factor and m_min must be positive")
        if self.workers < 1:
            raise ConfigError(f"workers must be at least 1, got {self.workers}")
        t = self.training
        if t.steps < 0 or t.batch_size < 1 or not t.learning_rate >= 0:
            raise ConfigError(f"Bad training settings: {t}")
        if t.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {t.optimizer!r}")
        if not 0 < t.train_fraction < 1:
            raise ConfigError(f"train_fraction must be in (0, 1), got {t.train_fraction}")
        if self.width is not None and self.height is not None:
            try:
                self.geometry
            except ValueError as e:
                raise ConfigError(str(e)) from e

        for name in required:
            path = getattr(self.paths, name)
            if path is None:
                raise ConfigError(f"paths.{name} is not configured")
            if not Path(path).exists():
                raise ConfigError(f"paths.{name} does not exist: {path}")
        return self

    def override(self, **values: Any) -> "PipelineConfig":
        "Replace top-level or `paths` fields; None values are ignored."
        top = {k: v for k, v in values.items() if v is not None and k in _field_names(self)}
        path_values = {
            k: Path(v) for k, v in values.items() if v is not None and k in _field_names(self.paths)
        }
        unknown = set(values) - set(top) - set(path_values)
        unknown = {k for k in unknown if values[k] is not None}
        if unknown:
            raise ConfigError(f"Unknown config overrides: {sorted(unknown)}")
        return replace(self, paths=replace(self.paths, **path_values), **top)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["paths"] = {k: None if v is None else str(v) for k, v in d["paths"].items()}
        d["network"] = self.network.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        try:
            d = dict(d)
            version = d.get("version", CONFIG_VERSION)
            if version != CONFIG_VERSION:
                raise ConfigError(f"Unsupported config version {version}, expected {CONFIG_VERSION}")
            _check_keys(d, cls, "config")
            paths = d.pop("paths", {}) or {}
            _check_keys(paths, Paths, "paths")
            training = d.pop("training", {}) or {}
            _check_keys(training, TrainSettings, "training")
            synth = d.pop("synth", {}) or {}
            _check_keys(synth, SynthSettings, "synth")
            network = d.pop("network", {}) or {}
            _check_keys(network, NetworkConfig, "network")
            return cls(
                paths=Paths(**{k: None if v is None else Path(v) for k, v in paths.items()}),
                training=TrainSettings(**training),
                synth=SynthSettings(**synth),
                network=NetworkConfig.from_dict(network),
                **d,
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Invalid config: {e}") from e


def _field_names(obj) -> set[str]:
    return {f.name for f in fields(obj)}


def _check_keys(d: dict, cls, where: str):
    unknown = set(d) - _field_names(cls)
    if unknown:
        raise ConfigError(f"Unknown keys in {where}: {sorted(unknown)}")


def load_config(path: Path | str | None) -> PipelineConfig:
    "Defaults when `path` is None."
    if path is None:
        return PipelineConfig()
    try:
        data = orjson.loads(Path(path).read_bytes())
    except FileNotFoundError:
        raise ConfigError(f"Config file not found: {path}") from None
    except orjson.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must hold a JSON object")
    logger.debug(f"Loaded config {path}")
    return PipelineConfig.from_dict(data)


def dump_config(config: PipelineConfig) -> bytes:
    return json_dump(config.to_dict())
