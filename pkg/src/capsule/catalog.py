"""Class catalog, dataset manifests, class statistics and synthetic toy data."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

SPLITS = ("train", "val")
ORIGINS = ("original", "augmented")
MANIFEST_HEADER = ("image_path", "class_name", "split", "origin", "source_path")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}

# Ten-class capsule endoscopy label set; a convenience default, override with a catalog file.
DEFAULT_CLASSES = (
    "Angioectasia",
    "Bleeding",
    "Erosion",
    "Erythema",
    "Foreign Body",
    "Lymphangiectasia",
    "Normal",
    "Polyp",
    "Ulcer",
    "Worms",
)


class DataError(ValueError):
    """Raised for malformed, missing or inconsistent dataset inputs."""


@dataclass(frozen=True)
class ClassCatalog:
    classes: tuple[str, ...]
    normal_class: str

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if len(self.classes) < 2:
            raise DataError("a catalog needs at least 2 classes")
        if len(set(self.classes)) != len(self.classes):
            raise DataError(f"duplicate class names in catalog: {list(self.classes)}")
        if self.normal_class not in self.classes:
            raise DataError(f"normal class {self.normal_class!r} is not in the catalog")

    @property
    def abnormal(self) -> tuple[str, ...]:
        return tuple(c for c in self.classes if c != self.normal_class)

    def index(self, name: str) -> int:
        return self.classes.index(name)

    def check(self, name: str) -> None:
        if name not in self.classes:
            raise DataError(f"unknown class {name!r}; catalog has {list(self.classes)}")

    @classmethod
    def default(cls) -> ClassCatalog:
        return cls(DEFAULT_CLASSES, "Normal")

    @classmethod
    def load(cls, path: str | os.PathLike) -> ClassCatalog:
        path = Path(path)
        if not path.exists():
            raise DataError(f"catalog file not found: {path}")
        text = path.read_text()
        if path.suffix in (".yaml", ".yml"):
            import yaml

            doc = yaml.safe_load(text)
        else:
            doc = json.loads(text)
        try:
            return cls(tuple(doc["classes"]), doc["normal_class"])
        except KeyError as exc:
            raise DataError(f"catalog file {path} is missing key {exc}") from None

    def to_dict(self) -> dict:
        return {"classes": list(self.classes), "normal_class": self.normal_class}

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path


@dataclass(frozen=True, order=True)
class SampleRecord:
    image_path: str
    class_name: str
    split: str
    origin: str = "original"
    source_path: str = ""

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"split must be one of {SPLITS}, got {self.split!r} for {self.image_path}")
        if self.origin not in ORIGINS:
            raise DataError(f"origin must be one of {ORIGINS}, got {self.origin!r}")
        if self.origin == "augmented" and not self.source_path:
            raise DataError(f"augmented record {self.image_path} has no source_path")


@dataclass(eq=False)
class DatasetManifest:
    catalog: ClassCatalog
    records: list[SampleRecord] = field(default_factory=list)

    def __post_init__(self):
        seen: set[tuple[str, str]] = set()
        for r in self.records:
            self.catalog.check(r.class_name)
            key = (r.split, r.image_path)
            if key in seen:
                raise DataError(f"duplicate path in split {r.split!r}: {r.image_path}")
            seen.add(key)

    def __len__(self) -> int:
        return len(self.records)

    def __eq__(self, other: object) -> bool:
        # order-insensitive
        if not isinstance(other, DatasetManifest):
            return NotImplemented
        return self.catalog == other.catalog and sorted(self.records) == sorted(other.records)

    def select(self, split: str | None = None, origin: str | None = None) -> list[SampleRecord]:
        return [
            r
            for r in self.records
            if (split is None or r.split == split) and (origin is None or r.origin == origin)
        ]

    def write_csv(self, path: str | os.PathLike) -> Path:
        """Write the manifest; image paths are stored relative to the CSV's directory."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        base = path.parent.resolve()
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(MANIFEST_HEADER)
            for r in self.records:
                writer.writerow(
                    (
                        _relative(r.image_path, base),
                        r.class_name,
                        r.split,
                        r.origin,
                        _relative(r.source_path, base) if r.source_path else "",
                    )
                )
        return path


def _relative(p: str, base: Path) -> str:
    try:
        return Path(os.path.relpath(p, base)).as_posix()
    except ValueError:  # different drive
        return p


def _absolute(p: str, base: Path) -> str:
    q = Path(p)
    return os.path.normpath(q if q.is_absolute() else base / q)


# ----------------------------------------------------------------------------
# ingestion


def ingest(root_or_csv: str | os.PathLike, catalog: ClassCatalog) -> DatasetManifest:
    """Build a manifest from a ``split/class/image`` tree or a manifest CSV."""
    src = Path(root_or_csv)
    if not src.exists():
        raise DataError(f"dataset path does not exist: {src}")
    records = _ingest_csv(src, catalog) if src.is_file() else _ingest_tree(src, catalog)
    if not records:
        raise DataError(f"no images found under {src}")
    return DatasetManifest(catalog, records)


def _ingest_tree(root: Path, catalog: ClassCatalog) -> list[SampleRecord]:
    records = []
    for split_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        if split_dir.name not in SPLITS:
            raise DataError(f"unknown split directory {split_dir.name!r} under {root}; expected {SPLITS}")
        for class_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
            catalog.check(class_dir.name)
            for img in sorted(class_dir.iterdir()):
                if img.is_file() and img.suffix.lower() in IMAGE_SUFFIXES:
                    records.append(SampleRecord(os.path.normpath(img.resolve()), class_dir.name, split_dir.name))
    return records


def _ingest_csv(path: Path, catalog: ClassCatalog) -> list[SampleRecord]:
    base = path.parent.resolve()
    records = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"image_path", "class_name", "split"} - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{path} is missing columns {sorted(missing)}")
        for row in reader:
            catalog.check(row["class_name"])
            source = row.get("source_path") or ""
            records.append(
                SampleRecord(
                    _absolute(row["image_path"], base),
                    row["class_name"],
                    row["split"],
                    row.get("origin") or "original",
                    _absolute(source, base) if source else "",
                )
            )
    return records


# ----------------------------------------------------------------------------
# statistics


@dataclass(frozen=True)
class ClassStats:
    counts: dict[str, int]
    normal_class: str | None = None

    def __post_init__(self):
        for name, n in self.counts.items():
            if n < 0:
                raise DataError(f"negative count for {name!r}")

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def imbalance_ratio(self) -> float:
        """Largest over smallest count; classes with zero images are ignored."""
        nonzero = [n for n in self.counts.values() if n > 0]
        if not nonzero:
            raise DataError("imbalance ratio undefined: every class is empty")
        return max(nonzero) / min(nonzero)

    def without_normal(self) -> ClassStats:
        return ClassStats({k: v for k, v in self.counts.items() if k != self.normal_class}, None)


def compute_stats(
    manifest: DatasetManifest, split: str = "train", origin: str | None = "original"
) -> ClassStats:
    """Per-class counts for one split. ``origin=None`` counts original and augmented."""
    selected = manifest.select(split, origin)
    if not selected:
        raise DataError(f"no records in split {split!r} (origin={origin})")
    counts = {c: 0 for c in manifest.catalog.classes}
    for r in selected:
        counts[r.class_name] += 1
    return ClassStats(counts, manifest.catalog.normal_class)


def emit_distribution_plot(
    stats: ClassStats, out: str | os.PathLike, include_normal: bool = True, title: str | None = None
) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    counts = stats.counts if include_normal else stats.without_normal().counts
    if not counts:
        raise DataError("nothing to plot: class statistics are empty")
    out = Path(out)
    if not out.parent.exists():
        raise OSError(f"output directory does not exist: {out.parent}")

    names = list(counts)
    fig, ax = plt.subplots(figsize=(max(4.0, 0.8 * len(names) + 2), 4))
    bars = ax.bar(names, [counts[n] for n in names], color="#b5544c")
    ax.bar_label(bars, fontsize=7)
    ax.set_ylabel("training images")
    ax.set_title(title or ("Class distribution" + ("" if include_normal else " (without Normal)")))
    ax.tick_params(axis="x", rotation=45)
    fig.tight_layout()
    fig.savefig(out, format="png", metadata={"Software": None})
    plt.close(fig)
    return out


# ----------------------------------------------------------------------------
# synthetic datasets

_PALETTE = (
    (40, 200, 60),
    (30, 90, 230),
    (240, 220, 40),
    (250, 250, 250),
    (150, 40, 200),
    (30, 210, 210),
    (250, 130, 20),
    (20, 20, 20),
    (240, 40, 160),
)
_SHAPES = ("disc", "square", "ring", "cross")


def derive_seed(*parts: object) -> int:
    """Stable 64-bit seed from arbitrary parts (independent of PYTHONHASHSEED)."""
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _shape_mask(shape: str, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    if shape == "disc":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= r * 0.85
    if shape == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.5 * r) ** 2)
    arm = max(1.0, r / 3)
    return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))


def render_sample(
    class_pos: int | None, image_size: int, rng: np.random.Generator, quadrant: int | None = None
) -> np.ndarray:
    """Render one synthetic frame. ``class_pos=None`` draws background only (the Normal look).

    With ``quadrant`` (0=top-left, 1=top-right, 2=bottom-left, 3=bottom-right)
    the pattern lies entirely inside that quadrant.
    """
    s = image_size
    base = np.array([170.0, 85.0, 75.0]) + rng.normal(0, 12, size=3)
    yy, xx = np.mgrid[0:s, 0:s] / s
    phase = rng.uniform(0, 2 * np.pi, size=2)
    shade = 18.0 * np.sin(2 * np.pi * xx + phase[0]) * np.cos(2 * np.pi * yy + phase[1])
    img = base[None, None, :] + shade[..., None] + rng.normal(0, 8, size=(s, s, 3))
    if class_pos is not None:
        color = np.array(_PALETTE[class_pos % len(_PALETTE)], dtype=np.float64)
        shape = _SHAPES[(class_pos // len(_PALETTE) + class_pos) % len(_SHAPES)]
        r = s * rng.uniform(0.14, 0.2)
        if quadrant is None:
            lo, hi = r + 1, s - r - 1
            cx, cy = rng.uniform(lo, hi, size=2)
        else:
            half = s / 2
            ox, oy = (quadrant % 2) * half, (quadrant // 2) * half
            cx = ox + rng.uniform(r + 0.5, half - r - 0.5)
            cy = oy + rng.uniform(r + 0.5, half - r - 0.5)
        mask = _shape_mask(shape, s, cx, cy, r)
        img[mask] = color + rng.normal(0, 6, size=(int(mask.sum()), 3))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate_synthetic(
    catalog: ClassCatalog,
    per_class_counts: Mapping[str, int],
    image_size: int,
    seed: int,
    root: str | os.PathLike,
    val_counts: Mapping[str, int] | None = None,
    localized: bool = False,
) -> Path:
    """Write a deterministic toy dataset as ``root/<split>/<class>/*.png``.

    Every abnormal class gets its own colour/shape pattern on an endoscopy-like
    textured background; the Normal class is background only. With
    ``localized=True`` each pattern is confined to one random quadrant and the
    quadrant is recorded in ``root/quadrants.csv``.
    """
    from PIL import Image

    if image_size < 16:
        raise ValueError("image_size must be at least 16")
    root = Path(root)
    abnormal = catalog.abnormal
    quadrant_rows = []
    for split, counts in (("train", per_class_counts), ("val", val_counts or {})):
        if split == "val" and val_counts is None:
            continue
        for name, n in counts.items():
            catalog.check(name)
            if n < 0:
                raise ValueError(f"negative count for {name!r}")
            class_dir = root / split / name
            class_dir.mkdir(parents=True, exist_ok=True)
            pos = None if name == catalog.normal_class else abnormal.index(name)
            stem = name.replace(" ", "_").lower()
            for i in range(n):
                rng = np.random.default_rng(derive_seed(seed, split, name, i))
                quadrant = int(rng.integers(4)) if localized and pos is not None else None
                img = render_sample(pos, image_size, rng, quadrant)
                path = class_dir / f"{stem}_{i:05d}.png"
                Image.fromarray(img).save(path, format="PNG")
                if quadrant is not None:
                    quadrant_rows.append((f"{split}/{name}/{path.name}", quadrant))
    if localized:
        with (root / "quadrants.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("relative_path", "quadrant"))
            w.writerows(quadrant_rows)
    return root


def load_quadrants(root: str | os.PathLike) -> dict[str, int]:
    root = Path(root)
    with (root / "quadrants.csv").open(newline="") as fh:
        return {os.path.normpath(root.resolve() / row["relative_path"]): int(row["quadrant"]) for row in csv.DictReader(fh)}


def counts_from_records(records: Iterable[SampleRecord], catalog: ClassCatalog) -> dict[str, int]:
    counts = {c: 0 for c in catalog.classes}
    for r in records:
        counts[r.class_name] += 1
    return counts
