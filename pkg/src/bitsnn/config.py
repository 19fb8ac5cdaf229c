"""TOML run configuration: [train], [model], [reg], [data]."""
from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .trainer import RegularizerConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    channels: list = field(default_factory=lambda: [8, 16])
    blocks: int | None = None
    q_steps: int = 16
    pool_after: list | None = None
    kernel: int = 3
    lam_init: float = 1.0
    num_classes: int = 2
    input_size: int = 8

    def __post_init__(self):
        self.channels = [int(c) for c in self.channels]
        if self.blocks is not None and self.blocks != len(self.channels):
            raise ConfigError(f"model.blocks = {self.blocks} but {len(self.channels)} channel widths given")
        if self.pool_after is not None and len(self.pool_after) != len(self.channels):
            raise ConfigError("model.pool_after needs one flag per block")


@dataclass
class DataConfig:
    synthetic: bool = True
    n_train: int = 512
    n_test: int = 256
    images: str | None = None
    labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None

    def __post_init__(self):
        if not self.synthetic and not (self.images and self.labels):
            raise ConfigError("data: set synthetic = true or give images and labels paths")


@dataclass
class RunConfig:
    train: TrainConfig
    model: ModelConfig
    reg: RegularizerConfig
    data: DataConfig

    def as_dict(self) -> dict:
        return {"train": asdict(self.train), "model": asdict(self.model),
                "reg": asdict(self.reg), "data": asdict(self.data)}


_SECTIONS = {"train": TrainConfig, "model": ModelConfig, "reg": RegularizerConfig, "data": DataConfig}


def _build(cls, raw: dict, section: str):
    known = {f.name for f in fields(cls)}
    extra = sorted(set(raw) - known)
    if extra:
        raise ConfigError(f"[{section}]: unknown keys {extra}; allowed: {sorted(known)}")
    try:
        return cls(**raw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def parse_config(doc: dict, base: Path | None = None) -> RunConfig:
    extra = sorted(set(doc) - set(_SECTIONS))
    if extra:
        raise ConfigError(f"unknown sections {extra}")
    parts = {name: _build(cls, dict(doc.get(name, {})), name) for name, cls in _SECTIONS.items()}
    data = parts["data"]
    if base is not None:
        for attr in ("images", "labels", "test_images", "test_labels"):
            p = getattr(data, attr)
            if p and not Path(p).is_absolute():
                setattr(data, attr, str(base / p))
    return RunConfig(**parts)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(doc, base=path.parent)
