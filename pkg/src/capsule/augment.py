"""Tiered augmentation: transform definitions, per-class planning, seeded execution."""

from __future__ import annotations

import logging
import math
import os
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _accel
from .catalog import ClassCatalog, ClassStats, DataError, DatasetManifest, SampleRecord, derive_seed

logger = logging.getLogger(__name__)

KINDS = (
    "horizontal_flip",
    "vertical_flip",
    "rotate90",
    "color_jitter",
    "shift_scale_rotate",
    "gaussian_blur",
)
TIER_NAMES = ("heavy", "medium", "light")

# Parameter defaults follow common augmentation-library defaults.
DEFAULT_PARAMS: dict[str, dict[str, tuple[float, float]]] = {
    "horizontal_flip": {},
    "vertical_flip": {},
    "rotate90": {"k": (0, 3)},
    "color_jitter": {
        "brightness": (0.8, 1.2),
        "contrast": (0.8, 1.2),
        "saturation": (0.8, 1.2),
        "hue": (-0.1, 0.1),
    },
    "shift_scale_rotate": {
        "shift": (-0.0625, 0.0625),
        "scale": (-0.1, 0.1),
        "rotate": (-45.0, 45.0),
        "fill": (0.0, 0.0),
    },
    "gaussian_blur": {"kernel": (3, 7)},
}


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    probability: float = 0.5
    params: Mapping[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}; expected one of {KINDS}")
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability must lie in [0, 1], got {self.probability}")
        merged = {**DEFAULT_PARAMS[self.kind], **{k: tuple(v) for k, v in self.params.items()}}
        unknown = set(merged) - set(DEFAULT_PARAMS[self.kind])
        if unknown:
            raise ValueError(f"unknown parameters for {self.kind}: {sorted(unknown)}")
        for name, (lo, hi) in merged.items():
            if lo > hi:
                raise ValueError(f"{self.kind}.{name}: range ({lo}, {hi}) is not ordered")
        if self.kind == "gaussian_blur":
            lo, hi = merged["kernel"]
            if lo < 3 or lo % 2 == 0 or hi % 2 == 0:
                raise ValueError("gaussian_blur kernel bounds must be odd and >= 3")
        if self.kind == "rotate90":
            lo, hi = merged["k"]
            if lo < 0 or hi > 3:
                raise ValueError("rotate90 k must lie in 0..3")
        object.__setattr__(self, "params", merged)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "probability": self.probability, "params": {k: list(v) for k, v in self.params.items()}}

    @classmethod
    def from_dict(cls, d: Mapping) -> TransformSpec:
        return cls(d["kind"], float(d.get("probability", 0.5)), {k: tuple(v) for k, v in d.get("params", {}).items()})


@dataclass(frozen=True)
class AugmentationTier:
    name: str
    transforms: tuple[TransformSpec, ...]

    @property
    def kinds(self) -> frozenset[str]:
        return frozenset(t.kind for t in self.transforms)

    def __call__(self, image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        for spec in self.transforms:
            image = apply_transform(image, spec, rng)
        return image

    def to_dict(self) -> dict:
        return {"name": self.name, "transforms": [t.to_dict() for t in self.transforms]}

    @classmethod
    def from_dict(cls, d: Mapping) -> AugmentationTier:
        return cls(d["name"], tuple(TransformSpec.from_dict(t) for t in d["transforms"]))


def default_tiers(probability: float = 0.5) -> dict[str, AugmentationTier]:
    light = ("horizontal_flip", "vertical_flip")
    medium = light + ("rotate90", "color_jitter")
    heavy = medium + ("shift_scale_rotate", "gaussian_blur")
    return {
        name: AugmentationTier(name, tuple(TransformSpec(k, probability) for k in kinds))
        for name, kinds in (("heavy", heavy), ("medium", medium), ("light", light))
    }


# ----------------------------------------------------------------------------
# planning


def assign_tier(class_count: int, thresholds: tuple[int, int] = (500, 3000)) -> str:
    low, high = thresholds
    if not 0 < low < high:
        raise ValueError(f"thresholds must satisfy 0 < low < high, got {thresholds}")
    if class_count < 0:
        raise ValueError(f"class count must be non-negative, got {class_count}")
    if class_count < low:
        return "heavy"
    if class_count < high:
        return "medium"
    return "light"


@dataclass(frozen=True)
class PlanEntry:
    tier: str
    copies_per_image: int
    original_count: int

    @property
    def final_count(self) -> int:
        return self.original_count * (1 + self.copies_per_image)


@dataclass(frozen=True)
class AugmentationPlan:
    per_class: dict[str, PlanEntry]
    target_count: int
    warnings: tuple[str, ...] = ()

    def projected_counts(self) -> dict[str, int]:
        return {c: e.final_count for c, e in self.per_class.items()}

    def to_dict(self) -> dict:
        return {
            "target_count": self.target_count,
            "per_class": {
                c: {"tier": e.tier, "copies_per_image": e.copies_per_image, "original_count": e.original_count}
                for c, e in self.per_class.items()
            },
            "warnings": list(self.warnings),
        }

    def describe(self) -> str:
        lines = [f"{'class':<20} {'tier':<7} {'orig':>7} {'copies':>7} {'final':>7}"]
        for c, e in self.per_class.items():
            lines.append(f"{c:<20} {e.tier:<7} {e.original_count:>7} {e.copies_per_image:>7} {e.final_count:>7}")
        lines += [f"warning: {w}" for w in self.warnings]
        return "\n".join(lines)


def build_plan(
    stats: ClassStats,
    catalog: ClassCatalog,
    target_count: int,
    cap_multiplier: int,
    thresholds: tuple[int, int] = (500, 3000),
) -> AugmentationPlan:
    """Copies per original image so each abnormal class reaches ``target_count``.

    copies = min(cap, ceil(target / count) - 1); Normal is never augmented and
    empty classes get 0 copies plus a warning.
    """
    if target_count <= 0:
        raise ValueError("target_count must be positive")
    if cap_multiplier < 0:
        raise ValueError("cap_multiplier must be non-negative")
    per_class = {}
    warnings = []
    for name in catalog.classes:
        n = stats.counts.get(name, 0)
        tier = assign_tier(n, thresholds)
        if name == catalog.normal_class:
            copies = 0
        elif n == 0:
            copies = 0
            warnings.append(f"class {name!r} has no training images; nothing to augment")
        else:
            copies = min(cap_multiplier, math.ceil(target_count / n) - 1)
        per_class[name] = PlanEntry(tier, copies, n)
    for w in warnings:
        logger.warning(w)
    return AugmentationPlan(per_class, target_count, tuple(warnings))


# ----------------------------------------------------------------------------
# transforms


def _check_image(image: np.ndarray) -> None:
    if not isinstance(image, np.ndarray) or image.ndim != 3 or image.shape[2] != 3 or image.size == 0:
        shape = getattr(image, "shape", None)
        raise ValueError(f"expected a non-empty HxWx3 image, got shape {shape}")
    if image.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {image.dtype}")


def _to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def gaussian_taps(ksize: int) -> np.ndarray:
    sigma = 0.3 * ((ksize - 1) * 0.5 - 1) + 0.8  # OpenCV's sigma for a given kernel size
    x = np.arange(ksize, dtype=np.float64) - (ksize - 1) / 2
    taps = np.exp(-(x * x) / (2 * sigma * sigma))
    return (taps / taps.sum()).astype(np.float32)


_GRAY = np.array([0.299, 0.587, 0.114], dtype=np.float32)


def _color_jitter(image: np.ndarray, params, rng: np.random.Generator) -> np.ndarray:
    b = rng.uniform(*params["brightness"])
    c = rng.uniform(*params["contrast"])
    s = rng.uniform(*params["saturation"])
    h = rng.uniform(*params["hue"])
    x = image.astype(np.float32)
    x = np.clip(x * np.float32(b), 0, 255)
    mean = np.float32((x @ _GRAY).mean())
    x = np.clip((x - mean) * np.float32(c) + mean, 0, 255)
    gray = (x @ _GRAY)[..., None]
    x = np.clip((x - gray) * np.float32(s) + gray, 0, 255)
    if h != 0.0:
        x = _accel.hue_shift(x, h)
    return _to_uint8(x)


def affine_inverse(h: int, w: int, angle_deg: float, scale: float, dx: float, dy: float) -> np.ndarray:
    """Output-to-input map for rotation/scale about the centre followed by a shift (pixels)."""
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    a = math.radians(angle_deg)
    cos, sin = math.cos(a) / scale, math.sin(a) / scale
    # forward: p' = S R (p - c) + c + t ; inverse: p = R^-1 S^-1 (p' - c - t) + c
    inv = np.array([[cos, sin, 0.0], [-sin, cos, 0.0]])
    ox, oy = -cx - dx, -cy - dy
    inv[0, 2] = inv[0, 0] * ox + inv[0, 1] * oy + cx
    inv[1, 2] = inv[1, 0] * ox + inv[1, 1] * oy + cy
    return inv


def apply_transform(image: np.ndarray, spec: TransformSpec, rng: np.random.Generator) -> np.ndarray:
    """Apply one transform with its probability; outputs keep the input's height and width
    (rotate90 swaps them for non-square inputs)."""
    _check_image(image)
    if rng.random() >= spec.probability:
        return image
    p = spec.params
    kind = spec.kind
    if kind == "horizontal_flip":
        return np.ascontiguousarray(image[:, ::-1])
    if kind == "vertical_flip":
        return np.ascontiguousarray(image[::-1])
    if kind == "rotate90":
        k = int(rng.integers(int(p["k"][0]), int(p["k"][1]) + 1))
        return np.ascontiguousarray(np.rot90(image, k))
    if kind == "color_jitter":
        return _color_jitter(image, p, rng)
    if kind == "shift_scale_rotate":
        h, w, _ = image.shape
        dx = rng.uniform(*p["shift"]) * w
        dy = rng.uniform(*p["shift"]) * h
        scale = 1.0 + rng.uniform(*p["scale"])
        angle = rng.uniform(*p["rotate"])
        inv = affine_inverse(h, w, angle, scale, dx, dy)
        return _to_uint8(_accel.warp(image.astype(np.float32), inv, float(p["fill"][0])))
    # gaussian_blur
    lo, hi = int(p["kernel"][0]), int(p["kernel"][1])
    ksize = int(rng.choice(np.arange(lo, hi + 1, 2)))
    return _to_uint8(_accel.blur(image.astype(np.float32), gaussian_taps(ksize)))


# ----------------------------------------------------------------------------
# execution


def _slug(name: str) -> str:
    return name.replace(os.sep, "_")


def augmented_path(out_dir: Path, class_name: str, source: str, k: int) -> Path:
    return out_dir / _slug(class_name) / f"{Path(source).stem}_aug{k}.png"


def _augment_one(record: SampleRecord, copies: int, tier: AugmentationTier, seed: int, out_dir: Path) -> list[SampleRecord]:
    from PIL import Image

    with Image.open(record.image_path) as im:
        image = np.asarray(im.convert("RGB"))
    out = []
    for k in range(copies):
        rng = np.random.default_rng(derive_seed(seed, record.image_path, k))
        aug = tier(image, rng)
        dest = augmented_path(out_dir, record.class_name, record.image_path, k)
        Image.fromarray(aug).save(dest, format="PNG")
        out.append(SampleRecord(os.path.normpath(dest.resolve()), record.class_name, "train", "augmented", record.image_path))
    return out


def execute_plan(
    manifest: DatasetManifest,
    plan: AugmentationPlan,
    tiers: Mapping[str, AugmentationTier],
    seed: int,
    out_dir: str | os.PathLike,
    workers: int = 1,
) -> DatasetManifest:
    """Materialize augmented copies of original train images and return the extended manifest.

    Each copy's RNG is seeded from (seed, source path, copy index), so output is
    independent of processing order and worker count.
    """
    unknown = set(plan.per_class) - set(manifest.catalog.classes)
    if unknown:
        raise DataError(f"plan mentions classes absent from the manifest: {sorted(unknown)}")
    out_dir = Path(out_dir)
    jobs = []
    targets: set[Path] = set()
    for r in manifest.select("train", "original"):
        entry = plan.per_class.get(r.class_name)
        if entry is None or entry.copies_per_image == 0:
            continue
        for k in range(entry.copies_per_image):
            dest = augmented_path(out_dir, r.class_name, r.image_path, k)
            if dest in targets:
                raise DataError(f"two source images map to the same augmented file {dest}")
            targets.add(dest)
        jobs.append((r, entry.copies_per_image, tiers[entry.tier]))
    if not jobs:
        return DatasetManifest(manifest.catalog, list(manifest.records))

    for cls in {r.class_name for r, _, _ in jobs}:
        (out_dir / _slug(cls)).mkdir(parents=True, exist_ok=True)

    def run(job):
        r, copies, tier = job
        return _augment_one(r, copies, tier, seed, out_dir)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    new_records = [rec for batch in results for rec in batch]
    logger.info("wrote %d augmented images to %s", len(new_records), out_dir)
    return DatasetManifest(manifest.catalog, list(manifest.records) + new_records)


def tiers_to_config(tiers: Mapping[str, AugmentationTier]) -> dict:
    return {name: tier.to_dict()["transforms"] for name, tier in tiers.items()}


def tiers_from_config(doc: Mapping[str, Sequence[Mapping]] | None) -> dict[str, AugmentationTier]:
    tiers = default_tiers()
    for name, transforms in (doc or {}).items():
        if name not in TIER_NAMES:
            raise ValueError(f"unknown tier {name!r}")
        tiers[name] = AugmentationTier(name, tuple(TransformSpec.from_dict(t) for t in transforms))
    return tiers
