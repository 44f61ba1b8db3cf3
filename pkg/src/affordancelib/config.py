"""
Run configuration: the model, schedule, sampler and training sections merged into one value.

A run is described by a JSON object with up to four sections::

    {"model": {...}, "schedule": {...}, "sampler": {...}, "train": {...}}

Missing sections and fields take their defaults. Overrides are ``section.field=value`` strings
whose value is parsed as JSON when possible (``train.steps=100``, ``model.disable_poa=true``) and
kept as a plain string otherwise (``schedule.kind=linear-beta``).
"""

from __future__ import annotations

import json
import logging
from collections.abc import Iterable, Mapping
from pathlib import Path
from typing import Any

import attrs

from .diffusion import SamplerConfig, ScheduleConfig
from .exceptions import ConfigError
from .model import ModelConfig
from .training import TrainConfig

_LOGGER = logging.getLogger(__name__)

_SECTIONS: dict[str, type[Any]] = {
    "model": ModelConfig,
    "schedule": ScheduleConfig,
    "sampler": SamplerConfig,
    "train": TrainConfig,
}


@attrs.frozen
class RunConfig:
    model: ModelConfig = attrs.field(factory=ModelConfig)
    schedule: ScheduleConfig = attrs.field(factory=ScheduleConfig)
    sampler: SamplerConfig = attrs.field(factory=SamplerConfig)
    train: TrainConfig = attrs.field(factory=TrainConfig)

    def __attrs_post_init__(self) -> None:
        if self.sampler.steps > self.schedule.steps:
            raise ConfigError(
                f"sampler.steps={self.sampler.steps} exceeds schedule.steps={self.schedule.steps}"
            )

    def to_dict(self) -> dict[str, Any]:
        return {
            "model": self.model.to_dict(),
            "schedule": self.schedule.to_dict(),
            "sampler": self.sampler.to_dict(),
            "train": self.train.to_dict(),
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> RunConfig:
        if not isinstance(raw, Mapping):
            raise ConfigError(f"run configuration must be a JSON object, got {type(raw).__name__}")
        unknown = set(raw) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown configuration section(s): {', '.join(sorted(unknown))}")
        sections: dict[str, Any] = {}
        for name, section_type in _SECTIONS.items():
            values = raw.get(name, {})
            if not isinstance(values, Mapping):
                raise ConfigError(f"section {name!r} must be an object")
            known = {field.name for field in attrs.fields(section_type)}
            extra = set(values) - known
            if extra:
                raise ConfigError(f"unknown field(s) in {name!r}: {', '.join(sorted(extra))}")
            try:
                sections[name] = section_type(**values)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid {name!r} section: {exc}") from exc
        return cls(**sections)


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def with_overrides(raw: Mapping[str, Any], overrides: Iterable[str]) -> dict[str, Any]:
    """Apply ``section.field=value`` overrides to a raw configuration mapping."""
    merged: dict[str, Any] = {
        name: dict(values) if isinstance(values, Mapping) else values for name, values in raw.items()
    }
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, field = key.strip().partition(".")
        if not sep or not dot or not field:
            raise ConfigError(f"override {item!r} is not of the form section.field=value")
        if section not in _SECTIONS:
            raise ConfigError(f"override {item!r} names unknown section {section!r}")
        target = merged.setdefault(section, {})
        if not isinstance(target, dict):
            raise ConfigError(f"section {section!r} must be an object")
        target[field] = _parse_value(value.strip())
        _LOGGER.debug("Override %s.%s=%s", section, field, value)
    return merged


def load_run_config(
    path: Path | None = None,
    overrides: Iterable[str] = (),
    seed: int | None = None,
) -> RunConfig:
    """
    Read a run configuration file (or start from defaults), apply overrides and validate it.

    ``seed`` sets ``train.seed``, which governs every random draw of the run.
    """
    raw: Mapping[str, Any] = {}
    if path is not None:
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"configuration {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, Mapping):
            raise ConfigError(f"configuration {path} must hold a JSON object")
    extra = list(overrides)
    if seed is not None:
        extra.append(f"train.seed={seed}")
    return RunConfig.from_dict(with_overrides(raw, extra))
