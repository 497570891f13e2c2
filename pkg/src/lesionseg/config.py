"""Experiment configuration: an INI file whose sections mirror :class:`ExperimentConfig`.

Unknown sections or keys are rejected so a mistyped hyperparameter fails
loudly instead of silently falling back to a default.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .losses import LossConfig
from .network import ModelConfig
from .trainer import TrainSchedule


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))
        self.problems = problems


@dataclass
class SplitConfig:
    mode: str = "ratios"  # ratios | kfold
    ratios: tuple[float, float, float] = (0.6, 0.1, 0.3)
    k: int = 10
    val_fraction: float = 0.1
    seed: int = 0


@dataclass
class Thresholds:
    binarize: float = 0.5
    group: float = 0.015
    discriminate: float = 0.005
    synthetic_min_rate: float = 0.01


@dataclass
class AugmentConfig:
    synthetic: bool = False
    count: int = 0  # 0: one sample per infected training slice
    seed: int = 0
    zoom_min: float = 0.9
    zoom_max: float = 1.1
    shift_fraction: float = 0.05
    shear_degrees: float = 5.0


@dataclass
class DataConfig:
    resize: int = 0  # 0 keeps native size
    mae_region: str = "image"  # image | lung


@dataclass
class PathsConfig:
    manifest: str = ""
    healthy_manifest: str = ""
    infected_manifest: str = ""
    exclusions: str = ""
    output_dir: str = "runs"


@dataclass
class ModelSection:
    base_width: int = 32
    cpb_enabled: bool = True
    seed: int = 0

    def to_model_config(self) -> ModelConfig:
        return ModelConfig(self.base_width, self.cpb_enabled, self.seed)


@dataclass
class ExperimentConfig:
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    split: SplitConfig = field(default_factory=SplitConfig)
    thresholds: Thresholds = field(default_factory=Thresholds)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    data: DataConfig = field(default_factory=DataConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    base_dir: Path = field(default=Path("."), compare=False)

    def resolve(self, p: str) -> Path | None:
        if not p:
            return None
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path

    def with_seed(self, seed: int) -> "ExperimentConfig":
        self.model.seed = seed
        self.schedule.seed = seed
        self.split.seed = seed
        self.augment.seed = seed
        return self


SECTIONS = ("model", "loss", "schedule", "split", "thresholds", "augment", "data", "paths")


def _convert(raw: str, current, where: str, problems: list[str]):
    try:
        if isinstance(current, bool):
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            return tuple(float(v) for v in raw.split(","))
        return raw.strip()
    except ValueError as exc:
        problems.append(f"{where}: {exc}")
        return current


def parse_config(text: str, base_dir: Path = Path(".")) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"syntax: {exc}"]) from exc
    cfg = ExperimentConfig(base_dir=base_dir)
    problems: list[str] = []
    for section in parser.sections():
        if section not in SECTIONS:
            problems.append(f"{section}: unknown section")
            continue
        target = getattr(cfg, section)
        known = {f.name for f in fields(target)}
        for key, raw in parser.items(section):
            if key not in known:
                problems.append(f"{section}.{key}: unknown key")
                continue
            setattr(target, key, _convert(raw, getattr(target, key), f"{section}.{key}", problems))
    problems += validate(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([f"{path}: {exc.strerror}"]) from exc
    return parse_config(text, path.parent)


def validate(cfg: ExperimentConfig) -> list[str]:
    problems = []
    if cfg.model.base_width < 4:
        problems.append("model.base_width: must be >= 4")
    problems += [f"loss.{p}" for p in cfg.loss.validate()]
    problems += [f"schedule.{p}" for p in cfg.schedule.validate()]
    if cfg.split.mode not in ("ratios", "kfold"):
        problems.append(f"split.mode: expected ratios|kfold, got {cfg.split.mode!r}")
    if len(cfg.split.ratios) != 3 or any(r < 0 for r in cfg.split.ratios):
        problems.append("split.ratios: need three non-negative numbers")
    if cfg.split.k < 2:
        problems.append("split.k: must be >= 2")
    if not 0 <= cfg.split.val_fraction < 1:
        problems.append("split.val_fraction: must lie in [0, 1)")
    for f in fields(cfg.thresholds):
        v = getattr(cfg.thresholds, f.name)
        if not 0 <= v <= 1:
            problems.append(f"thresholds.{f.name}: must lie in [0, 1], got {v}")
    if cfg.augment.zoom_min > cfg.augment.zoom_max:
        problems.append("augment.zoom_min: exceeds zoom_max")
    if cfg.data.mae_region not in ("image", "lung"):
        problems.append(f"data.mae_region: expected image|lung, got {cfg.data.mae_region!r}")
    if cfg.data.resize and cfg.data.resize % 16:
        problems.append("data.resize: must be a multiple of 16")
    for key in ("manifest", "healthy_manifest", "infected_manifest", "exclusions"):
        p = cfg.resolve(getattr(cfg.paths, key))
        if p is not None and not p.exists():
            problems.append(f"paths.{key}: {p} does not exist")
    return problems


def dump_config(cfg: ExperimentConfig, resolve_paths: bool = False, include_paths: bool = True) -> str:
    """Deterministic INI rendering that :func:`parse_config` reads back.

    ``resolve_paths`` writes paths as absolute so a snapshot stays valid when
    stored elsewhere; ``include_paths=False`` leaves the section out.
    """
    lines = []
    for section in SECTIONS:
        if section == "paths" and not include_paths:
            continue
        lines.append(f"[{section}]")
        obj = getattr(cfg, section)
        for f in fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            elif section == "paths" and resolve_paths and v:
                v = str(cfg.resolve(v).resolve())
            lines.append(f"{f.name} = {v}")
        lines.append("")
    return "\n".join(lines)
