"""Run configuration: one YAML file with ``backbone``, ``compa``, ``med``,
``train`` and ``data`` sections. Unknown keys are rejected."""

from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .backbone import BackboneConfig
from .compa import CompaConfig
from .med_prior import MedConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    manifest: str = "data/manifest.jsonl"
    # teacher plug-in directory; empty means seeded synthetic teachers
    teachers: str = ""
    teacher_seed: int = 1000
    split_seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    compa: CompaConfig = field(default_factory=CompaConfig)
    med: MedConfig = field(default_factory=MedConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    @classmethod
    def from_dict(cls, raw: dict[str, Any] | None) -> "RunConfig":
        raw = dict(raw or {})
        sections = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(raw) - set(sections))
        if unknown:
            raise ConfigError(f"unknown config section(s): {unknown}")
        built = {}
        for f in fields(cls):
            sub_cls = f.default_factory  # type: ignore[misc]
            built[f.name] = _build(sub_cls, raw.get(f.name) or {}, f.name)
        return cls(**built)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if raw is not None and not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(raw)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["train"]["betas"] = list(d["train"]["betas"])
        return d

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    def replace(self, **sections: dict[str, Any]) -> "RunConfig":
        """Copy with overrides, e.g. ``cfg.replace(train={"lr": 1e-3})``."""
        d = self.to_dict()
        for name, over in sections.items():
            if name not in d:
                raise ConfigError(f"unknown config section {name!r}")
            d[name].update(over)
        return RunConfig.from_dict(d)


def _build(cls, values: dict[str, Any], section: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in section {section!r}: {unknown}")
    values = dict(values)
    if "betas" in values:
        values["betas"] = tuple(values["betas"])
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {section!r}: {exc}") from exc


def full_scale() -> RunConfig:
    """Full-size settings: ViT-Base shape, 768-d modality space, small LR and a long schedule."""
    return RunConfig(
        backbone=BackboneConfig(depth=12, dim=768, heads=12),
        train=TrainConfig(lr=1e-5, total_steps=300_000),
    )
