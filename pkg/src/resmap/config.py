"""JSON run configuration with located validation errors.

A run config binds the whole pipeline together: scene parameters,
annotator profiles, model and training settings, carbon rates, output
directory, and the global seed.  Every section is optional and falls
back to library defaults.  Unknown keys are rejected with their
location so a typo like ``train.lr0`` fails loudly instead of being
silently ignored.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Optional

from .carbon import CarbonParams
from .field import AnnotatorProfile, DEFAULT_PROFILES, SceneParams
from .model import TrainConfig, UNetConfig

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_config"]


class ConfigError(ValueError):
    """Invalid or malformed run configuration."""


@dataclass(frozen=True)
class RunConfig:
    scene: SceneParams = SceneParams()
    annotators: tuple = DEFAULT_PROFILES
    model: UNetConfig = UNetConfig()
    train: TrainConfig = TrainConfig()
    carbon: CarbonParams = CarbonParams()
    tiles: int = 8
    samples: int = 16
    risk_tau: float = 0.5
    out: Optional[str] = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.tiles < 1:
            raise ConfigError(f"tiles must be >= 1, got {self.tiles}")
        if self.samples < 1:
            raise ConfigError(f"samples must be >= 1, got {self.samples}")
        if not 0.0 <= self.risk_tau <= 1.0:
            raise ConfigError(f"risk_tau must be in [0, 1], got {self.risk_tau}")


_SCALARS = (int, float, str, bool)


def _build_section(cls, payload: dict, where: str):
    """Instantiate a dataclass from a JSON object, rejecting unknown keys."""
    if not isinstance(payload, dict):
        raise ConfigError(f"'{where}' must be an object, got {type(payload).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in payload.items():
        if key not in known:
            raise ConfigError(f"unknown key '{key}' in '{where}'")
        if isinstance(value, list):
            value = tuple(value)
        elif value is not None and not isinstance(value, _SCALARS):
            raise ConfigError(f"'{where}.{key}' has unsupported type {type(value).__name__}")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{where}' section: {exc}") from exc


_SECTIONS = {
    "scene": SceneParams,
    "model": UNetConfig,
    "train": TrainConfig,
    "carbon": CarbonParams,
}
_SCALAR_KEYS = {"tiles": int, "samples": int, "risk_tau": (int, float),
                "out": str, "seed": int}


def parse_config(payload: dict) -> RunConfig:
    """Build a RunConfig from decoded JSON, validating every section."""
    if not isinstance(payload, dict):
        raise ConfigError(f"config root must be an object, got {type(payload).__name__}")
    kwargs = {}
    for key, value in payload.items():
        if key in _SECTIONS:
            kwargs[key] = _build_section(_SECTIONS[key], value, key)
        elif key == "annotators":
            if not isinstance(value, list) or not value:
                raise ConfigError("'annotators' must be a non-empty array")
            kwargs[key] = tuple(
                _build_section(AnnotatorProfile, item, f"annotators[{i}]")
                for i, item in enumerate(value)
            )
        elif key in _SCALAR_KEYS:
            want = _SCALAR_KEYS[key]
            if isinstance(value, bool) or not isinstance(value, want):
                raise ConfigError(
                    f"'{key}' must be {getattr(want, '__name__', 'number')}, "
                    f"got {type(value).__name__}"
                )
            kwargs[key] = value
        else:
            raise ConfigError(f"unknown key '{key}' at config root")
    try:
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path: str) -> RunConfig:
    """Parse a JSON config file into a validated RunConfig."""
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return parse_config(payload)
