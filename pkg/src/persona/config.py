"""Run configuration: sectioned ``key = value`` text with strict keys.

Every field has a default, so an empty file is a complete configuration.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import ConfigurationError, InvalidInputError
from .training import TrainConfig

SCHEMA_VERSION = 1
OUTPUT_ENV = "PERSONA_OUTPUT_DIR"

THRESHOLD_SWEEP = (0.1, 0.5, 1.0, 5.0)
GROUP_SWEEP = (2, 3, 5, 10)


@dataclass
class RunSection:
    schema_version: int = SCHEMA_VERSION
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "runs/default"
    threads: int = 1
    schedule: str = "two_phase"  # or "alternating"


@dataclass
class DataSection:
    source: str = "synthetic"  # or "csv"
    path: str = ""
    n_archetypes: int = 5
    n_devices: int = 200
    vocab_size: int = 500
    n_clusters: int = 10
    seq_len: int = 100
    peakedness: float = 0.9
    clusters_per_archetype: int = 3
    persistence: float = 0.5
    item_skew: float = 1.0
    shift_fraction: float = 0.5
    history_fraction: float = 0.7
    eval_negatives: int = 49


@dataclass
class ModelSection:
    embed_dim: int = 16
    hidden_dim: int = 16
    pooling: str = "last"
    adaptive_layers: int = 2
    adaptive_width: int = 16
    editor_dim: int = 32
    editor_item_dim: int = 16
    head_scale: float = 0.1
    editor_seed_embedding: bool = True  # start the encoder's item table from the backbone's


@dataclass
class PersonaSection:
    threshold: float = 1.0
    groups: int = 5
    clkt: bool = True
    window: int = 20
    sync_every: int = 5
    partition_min_length: int = 1
    partition_normalize: bool = False
    kmeans_iters: int = 100
    kmeans_restarts: int = 10
    centroid_init: bool = True
    prototype_with_editor: bool = True
    threshold_sweep: tuple[float, ...] = THRESHOLD_SWEEP
    group_sweep: tuple[int, ...] = GROUP_SWEEP


def _train(**kw) -> Any:
    return field(default_factory=lambda: TrainConfig(**kw))


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    persona: PersonaSection = field(default_factory=PersonaSection)
    train_dam: TrainConfig = _train(epochs=20, learning_rate=5e-3)
    train_editor: TrainConfig = _train(epochs=10, learning_rate=3e-3)
    group_prototype: TrainConfig = _train(epochs=5, learning_rate=2e-3)
    group_editor: TrainConfig = _train(epochs=5, learning_rate=1e-3)
    device_finetune: TrainConfig = _train(epochs=10, learning_rate=1e-3, batch_size=1, early_stop_patience=1)

    def validate(self) -> "RunConfig":
        p = self.persona
        if not p.threshold > 0:
            raise ConfigurationError("persona.threshold must be positive")
        if p.groups < 1:
            raise ConfigurationError("persona.groups must be >= 1")
        if p.window < 1 or p.sync_every < 0:
            raise ConfigurationError("persona.window must be >= 1 and sync_every >= 0")
        if self.model.adaptive_layers < 1:
            raise ConfigurationError("model.adaptive_layers must be >= 1")
        if self.model.pooling not in ("mean", "last", "gru_lite"):
            raise ConfigurationError(f"unknown pooling {self.model.pooling!r}")
        if self.data.source not in ("synthetic", "csv"):
            raise ConfigurationError(f"unknown data source {self.data.source!r}")
        if self.run.schedule not in ("two_phase", "alternating"):
            raise ConfigurationError(f"unknown schedule {self.run.schedule!r}")
        if self.run.schema_version != SCHEMA_VERSION:
            raise ConfigurationError(f"config schema {self.run.schema_version} is not {SCHEMA_VERSION}")
        if not self.run.seeds:
            raise ConfigurationError("run.seeds must list at least one seed")
        return self

    def adaptive_widths(self) -> list[int]:
        return [self.model.adaptive_width] * (self.model.adaptive_layers - 1)

    def output_dir(self) -> Path:
        return Path(os.environ.get(OUTPUT_ENV) or self.run.output_dir)

    def replace(self, **sections) -> "RunConfig":
        return dataclasses.replace(self, **sections)

    def with_overrides(self, overrides: dict[str, str]) -> "RunConfig":
        """Apply ``{"section.key": "text"}`` overrides, returning a copy."""
        cfg = copy_config(self)
        for dotted, text in overrides.items():
            if "." not in dotted:
                raise ConfigurationError(f"override {dotted!r} must be section.key")
            sec, key = dotted.split(".", 1)
            _assign(cfg, sec, key, text)
        return cfg.validate()

    def to_text(self) -> str:
        parser = configparser.ConfigParser()
        for f in fields(self):
            sec = getattr(self, f.name)
            parser[f.name] = {sf.name: _render(getattr(sec, sf.name)) for sf in fields(sec)}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def copy_config(cfg: RunConfig) -> RunConfig:
    return RunConfig(**{f.name: dataclasses.replace(getattr(cfg, f.name)) for f in fields(cfg)})


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(str(x) for x in v)
    return str(v)


def _convert(template, text: str, where: str):
    text = text.strip()
    try:
        if isinstance(template, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(template, int):
            return int(text)
        if isinstance(template, float):
            return float(text)
        if isinstance(template, tuple):
            parts = [p for p in text.replace(";", ",").split(",") if p.strip()]
            kind = type(template[0]) if template else int
            return tuple(kind(p.strip()) for p in parts)
        return text
    except ValueError:
        raise ConfigurationError(f"{where}: cannot parse {text!r}") from None


def _assign(cfg: RunConfig, section: str, key: str, text: str) -> None:
    names = {f.name for f in fields(cfg)}
    if section not in names:
        raise ConfigurationError(f"unknown config section [{section}]")
    sec = getattr(cfg, section)
    keys = {f.name for f in fields(sec)}
    if key not in keys:
        raise ConfigurationError(f"unknown key {key!r} in [{section}]")
    value = _convert(getattr(sec, key), text, f"{section}.{key}")
    setattr(sec, key, value)
    if isinstance(sec, TrainConfig):
        try:
            sec.__post_init__()
        except InvalidInputError as exc:
            raise ConfigurationError(f"[{section}]: {exc}") from None


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config: {exc}") from None
    cfg = RunConfig()
    for section in parser.sections():
        for key, value in parser[section].items():
            _assign(cfg, section, key, value)
    return cfg.validate()


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))
