"""Declarative run configuration: an INI-style file plus key=value overrides.

Sections map onto dataclasses:

    [run]    seed
    [model]  everything in DecoderConfig (arrangement, d_model, ...)
    [audio]  feature_dim, sample_rate, freeze_convs
    [train]  lr, epochs, max_steps, ...

Override strings look like "model.d_model=32" or "seed=7".
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .audio import AudioFrontendConfig
from .decoder import DecoderConfig
from .errors import ConfigError
from .model import SpeechMotionModel
from .training import TrainConfig


@dataclass
class AudioOptions:
    feature_dim: int = 64
    sample_rate: int = 16000
    freeze_convs: bool = False


@dataclass
class PipelineConfig:
    seed: int = 0
    model: DecoderConfig = field(default_factory=lambda: DecoderConfig(
        vertex_count=240, n_subjects=2))
    audio: AudioOptions = field(default_factory=AudioOptions)
    train: TrainConfig = field(default_factory=TrainConfig)

    def frontend_config(self) -> AudioFrontendConfig:
        return AudioFrontendConfig(
            d_model=self.model.d_model,
            feature_dim=self.audio.feature_dim,
            sample_rate=self.audio.sample_rate,
            freeze_convs=self.audio.freeze_convs,
        )

    def build_model(self) -> SpeechMotionModel:
        return SpeechMotionModel(self.model, self.frontend_config(),
                                 seed=self.seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTION_TARGETS = {"model": "model", "audio": "audio", "train": "train"}


def _coerce(raw: str, target_type, key: str):
    raw = raw.strip()
    base = target_type
    # unwrap X | None annotations
    if hasattr(target_type, "__args__"):
        args = [a for a in target_type.__args__ if a is not type(None)]
        if raw.lower() in ("none", ""):
            return None
        base = args[0]
    try:
        if base is bool:
            if raw.lower() in ("true", "yes", "1", "on"):
                return True
            if raw.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if base is int:
            return int(raw)
        if base is float:
            return float(raw)
        if base is str:
            return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    raise ConfigError(f"option {key} has unsupported type {target_type}")


def _apply(section_obj, key: str, raw: str, section_name: str) -> None:
    import typing

    names = {f.name for f in fields(section_obj)}
    if key not in names:
        raise ConfigError(f"unknown option {section_name}.{key}")
    hints = typing.get_type_hints(type(section_obj))
    value = _coerce(raw, hints[key], f"{section_name}.{key}")
    setattr(section_obj, key, value)


def load_config(path=None) -> PipelineConfig:
    cfg = PipelineConfig()
    if path is None:
        return cfg
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    for section in parser.sections():
        if section == "run":
            for key, raw in parser.items(section):
                if key != "seed":
                    raise ConfigError(f"unknown option run.{key}")
                cfg.seed = _coerce(raw, int, "run.seed")
        elif section in _SECTION_TARGETS:
            target = getattr(cfg, _SECTION_TARGETS[section])
            for key, raw in parser.items(section):
                _apply(target, key, raw, section)
        else:
            raise ConfigError(f"unknown config section [{section}]")
    _revalidate(cfg)
    return cfg


def apply_overrides(cfg: PipelineConfig, overrides: list[str]) -> PipelineConfig:
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value: {item!r}")
        dotted, raw = item.split("=", 1)
        dotted = dotted.strip()
        if dotted in ("seed", "run.seed"):
            cfg.seed = _coerce(raw, int, "seed")
            continue
        if "." not in dotted:
            raise ConfigError(f"override key needs a section prefix: {dotted!r}")
        section, key = dotted.split(".", 1)
        if section not in _SECTION_TARGETS:
            raise ConfigError(f"unknown config section {section!r}")
        _apply(getattr(cfg, section), key, raw, section)
    _revalidate(cfg)
    return cfg


def _revalidate(cfg: PipelineConfig) -> None:
    # dataclass __post_init__ checks only run at construction; re-run them
    # after field-level mutation
    DecoderConfig(**dataclasses.asdict(cfg.model))
