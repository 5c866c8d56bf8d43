"""Run configuration: one YAML/JSON document drives every CLI command."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .augment import AugmentationTier, tiers_from_config, tiers_to_config
from .catalog import ClassCatalog
from .model import ModelSpec
from .trainer import TrainConfig

MODES = ("curriculum", "direct", "both")


class ConfigError(ValueError):
    """Invalid or unresolvable run configuration."""


@dataclass
class AugmentConfig:
    thresholds: tuple[int, int] = (500, 3000)
    target_count: int = 3000
    cap_multiplier: int = 25
    workers: int = 1
    tiers: dict[str, AugmentationTier] = field(default_factory=lambda: tiers_from_config(None))


@dataclass
class CurriculumConfig:
    remainder_mode: str = "aggregate"
    ordering_source: str = "original"  # or "augmented"


@dataclass
class RunConfig:
    dataset: Path
    output_dir: Path
    seed: int = 0
    catalog: Path | None = None
    mode: str = "curriculum"
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    source: Path | None = None

    def load_catalog(self) -> ClassCatalog:
        return ClassCatalog.load(self.catalog) if self.catalog else ClassCatalog.default()

    @property
    def augmented_dir(self) -> Path:
        return self.output_dir / "augmented"

    @property
    def augmented_manifest(self) -> Path:
        return self.augmented_dir / "manifest.csv"

    def to_dict(self) -> dict[str, Any]:
        model = asdict(self.model)
        model["feature_dims"] = list(model["feature_dims"])
        return {
            "dataset": str(self.dataset),
            "catalog": str(self.catalog) if self.catalog else None,
            "output_dir": str(self.output_dir),
            "seed": self.seed,
            "mode": self.mode,
            "augment": {
                "thresholds": list(self.augment.thresholds),
                "target_count": self.augment.target_count,
                "cap_multiplier": self.augment.cap_multiplier,
                "workers": self.augment.workers,
                "tiers": tiers_to_config(self.augment.tiers),
            },
            "curriculum": asdict(self.curriculum),
            "model": model,
            "train": asdict(self.train),
        }

    def write_snapshot(self, directory: Path) -> Path:
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "config_snapshot.yaml"
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path


def _pick(cls, doc: dict, section: str) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    return doc


def parse_config(doc: dict, base: Path | None = None) -> RunConfig:
    base = base or Path.cwd()

    def resolve(p):
        if p is None:
            return None
        q = Path(os.path.expanduser(str(p)))
        return q if q.is_absolute() else (base / q)

    doc = dict(doc)
    for key in ("dataset", "output_dir"):
        if not doc.get(key):
            raise ConfigError(f"config is missing required key {key!r}")
    try:
        aug_doc = dict(doc.get("augment") or {})
        tiers = tiers_from_config(aug_doc.pop("tiers", None))
        augment = AugmentConfig(**_pick(AugmentConfig, aug_doc, "augment"), tiers=tiers)
        augment.thresholds = tuple(augment.thresholds)
        curriculum = CurriculumConfig(**_pick(CurriculumConfig, doc.get("curriculum") or {}, "curriculum"))
        model = ModelSpec(**_pick(ModelSpec, doc.get("model") or {}, "model"))
        train = TrainConfig(**_pick(TrainConfig, doc.get("train") or {}, "train"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if curriculum.remainder_mode not in ("aggregate", "drop"):
        raise ConfigError(f"curriculum.remainder_mode must be aggregate or drop, got {curriculum.remainder_mode!r}")
    if curriculum.ordering_source not in ("original", "augmented"):
        raise ConfigError("curriculum.ordering_source must be original or augmented")
    mode = doc.get("mode", "curriculum")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    seed = int(doc.get("seed", 0))
    if "seed" not in (doc.get("train") or {}):
        train.seed = seed
    extra = set(doc) - {"dataset", "output_dir", "seed", "catalog", "mode", "augment", "curriculum", "model", "train"}
    if extra:
        raise ConfigError(f"unknown top-level keys: {sorted(extra)}")
    return RunConfig(
        dataset=resolve(doc["dataset"]),
        output_dir=resolve(doc["output_dir"]),
        seed=seed,
        catalog=resolve(doc.get("catalog")),
        mode=mode,
        augment=augment,
        curriculum=curriculum,
        model=model,
        train=train,
    )


def load_config(path: str | os.PathLike) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        doc = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path} must contain a mapping")
    cfg = parse_config(doc, path.parent.resolve())
    cfg.source = path
    return cfg


def validate_paths(cfg: RunConfig) -> None:
    if not cfg.dataset.exists():
        raise ConfigError(f"dataset path does not exist: {cfg.dataset}")
    if cfg.catalog is not None and not cfg.catalog.exists():
        raise ConfigError(f"catalog file does not exist: {cfg.catalog}")
