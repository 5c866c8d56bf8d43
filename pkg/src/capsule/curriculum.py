"""Easiest-first curriculum: Normal vs. Abnormal, then one abnormal class per stage."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass

from .catalog import ClassCatalog, ClassStats, DataError, DatasetManifest, SampleRecord

ABNORMAL = "Abnormal"
ABNORMAL_REST = "Abnormal-rest"
EXCLUDED = "excluded"
REMAINDER_MODES = ("aggregate", "drop")


@dataclass(frozen=True)
class Stage:
    index: int
    label_space: tuple[str, ...]
    added_class: str  # "" for stage 0
    remainder_mode: str = "aggregate"
    introduced: frozenset[str] = frozenset()  # abnormal classes added at stages <= index

    @property
    def concrete_classes(self) -> tuple[str, ...]:
        return tuple(x for x in self.label_space if x not in (ABNORMAL, ABNORMAL_REST))

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "label_space": list(self.label_space),
            "added_class": self.added_class,
            "remainder_mode": self.remainder_mode,
        }


@dataclass(frozen=True)
class CurriculumSchedule:
    stages: tuple[Stage, ...]
    ordering: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.stages)

    def __iter__(self):
        return iter(self.stages)

    @property
    def final(self) -> Stage:
        return self.stages[-1]

    def to_dict(self) -> dict:
        return {"ordering": list(self.ordering), "stages": [s.to_dict() for s in self.stages]}


def difficulty_order(counts: Mapping[str, int], catalog: ClassCatalog) -> list[str]:
    """Abnormal classes from most to fewest training images; ties keep catalog order."""
    return sorted(catalog.abnormal, key=lambda c: (-counts[c], catalog.index(c)))


def build_schedule(stats: ClassStats, catalog: ClassCatalog, remainder_mode: str = "aggregate") -> CurriculumSchedule:
    if remainder_mode not in REMAINDER_MODES:
        raise ValueError(f"remainder_mode must be one of {REMAINDER_MODES}")
    if catalog.normal_class not in stats.counts:
        raise DataError(f"class statistics lack the normal class {catalog.normal_class!r}")
    missing = [c for c in catalog.classes if c not in stats.counts]
    if missing:
        raise DataError(f"class statistics do not cover {missing}")

    ordering = difficulty_order(stats.counts, catalog)
    normal = catalog.normal_class
    stages = [Stage(0, (normal, ABNORMAL), "", remainder_mode)]
    for k, added in enumerate(ordering, start=1):
        introduced = frozenset(ordering[:k])
        concrete = tuple(c for c in catalog.classes if c == normal or c in introduced)
        remaining = k < len(ordering)
        space = concrete + ((ABNORMAL_REST,) if remaining and remainder_mode == "aggregate" else ())
        stages.append(Stage(k, space, added, remainder_mode, introduced))
    return CurriculumSchedule(tuple(stages), tuple(ordering))


def remap_label(stage: Stage, class_name: str, catalog: ClassCatalog) -> str:
    catalog.check(class_name)
    if class_name == catalog.normal_class:
        return class_name
    if stage.index == 0:
        return ABNORMAL
    if class_name in stage.introduced:
        return class_name
    return ABNORMAL_REST if stage.remainder_mode == "aggregate" else EXCLUDED


@dataclass(frozen=True)
class StagedRecord:
    record: SampleRecord
    label: str


def stage_manifest(manifest: DatasetManifest, stage: Stage, catalog: ClassCatalog | None = None) -> list[StagedRecord]:
    """Records relabelled into the stage's label space; drop mode omits excluded ones."""
    catalog = catalog or manifest.catalog
    out = []
    for r in manifest.records:
        label = remap_label(stage, r.class_name, catalog)
        if label != EXCLUDED:
            out.append(StagedRecord(r, label))
    return out


def final_stage(catalog: ClassCatalog, remainder_mode: str = "aggregate") -> Stage:
    """Single stage over the full catalog (the non-curriculum baseline)."""
    return Stage(1, catalog.classes, "", remainder_mode, frozenset(catalog.abnormal))
