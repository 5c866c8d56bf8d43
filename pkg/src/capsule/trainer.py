"""Staged (curriculum) and direct training loops."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .catalog import DatasetManifest
from .curriculum import CurriculumSchedule, Stage, StagedRecord, final_stage, stage_manifest
from .metrics import MetricsReport, confusion, weighted_report
from .model import CapsuleNet, ModelSpec, build_model, expand_head, save_checkpoint

logger = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    """Raised when optimization produces a non-finite loss."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs_per_stage: int = 5
    class_weights: bool = False
    seed: int = 0
    device: str = "cpu"
    deterministic: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs_per_stage < 1:
            raise ValueError("epochs_per_stage must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


@dataclass
class EpochRecord:
    stage: int
    epoch: int
    train_loss: float
    steps: int
    val: dict[str, float] | None = None


@dataclass
class TrainingLog:
    mode: str
    seed: int
    config: dict
    epochs: list[EpochRecord] = field(default_factory=list)
    stages: list[dict] = field(default_factory=list)
    wall_time: float = 0.0
    final_report: dict | None = None
    schedule: dict | None = None

    @property
    def losses(self) -> list[float]:
        return [e.train_loss for e in self.epochs]

    @property
    def total_steps(self) -> int:
        return sum(e.steps for e in self.epochs)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "seed": self.seed,
            "config": self.config,
            "schedule": self.schedule,
            "stages": self.stages,
            "epochs": [asdict(e) for e in self.epochs],
            "wall_time": self.wall_time,
            "final_report": self.final_report,
        }

    def write(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path


# ----------------------------------------------------------------------------
# data


class ImageCache:
    """Decoded images as a uint8 tensor, keyed by path; loaded once per run."""

    def __init__(self, input_size: int):
        self.input_size = input_size
        self._images: dict[str, torch.Tensor] = {}

    def get(self, path: str) -> torch.Tensor:
        img = self._images.get(path)
        if img is None:
            img = load_image(path, self.input_size)
            self._images[path] = img
        return img

    def batch(self, paths: Sequence[str]) -> torch.Tensor:
        return to_input(torch.stack([self.get(p) for p in paths]))


def load_image(path: str, input_size: int) -> torch.Tensor:
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (input_size, input_size):
            im = im.resize((input_size, input_size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.uint8)
    return torch.from_numpy(arr.copy()).permute(2, 0, 1)


def to_input(batch_uint8: torch.Tensor) -> torch.Tensor:
    return (batch_uint8.float() / 255.0 - 0.5) / 0.5


def _configure(config: TrainConfig) -> None:
    if config.deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


def _device(config: TrainConfig) -> torch.device:
    return torch.device(os.environ.get("CAPSULE_DEVICE") or config.device)


def _class_weights(labels: list[int], n: int) -> torch.Tensor:
    counts = np.bincount(labels, minlength=n).astype(np.float64)
    w = np.where(counts > 0, counts.sum() / (n * np.maximum(counts, 1)), 0.0)
    return torch.tensor(w, dtype=torch.float32)


# ----------------------------------------------------------------------------
# evaluation


@torch.no_grad()
def predict(model: CapsuleNet, paths: Sequence[str], cache: ImageCache, batch_size: int = 128, device="cpu") -> list[str]:
    model.eval()
    out = []
    for i in range(0, len(paths), batch_size):
        logits = model(cache.batch(paths[i : i + batch_size]).to(device))
        out.extend(model.class_names[j] for j in logits.argmax(dim=1).tolist())
    return out


def evaluate(model: CapsuleNet, staged: Sequence[StagedRecord], cache: ImageCache, method_name: str = "", device="cpu") -> MetricsReport:
    preds = predict(model, [s.record.image_path for s in staged], cache, device=device)
    cm = confusion([s.label for s in staged], preds, model.class_names)
    return weighted_report(cm, method_name)


# ----------------------------------------------------------------------------
# training


def train_stage(
    model: CapsuleNet,
    train: Sequence[StagedRecord],
    config: TrainConfig,
    val: Sequence[StagedRecord] | None = None,
    stage_index: int = 0,
    cache: ImageCache | None = None,
    epochs: int | None = None,
) -> tuple[CapsuleNet, list[EpochRecord]]:
    """Optimize ``model`` on one stage's relabelled records with Adam."""
    if not train:
        raise ValueError(f"stage {stage_index} has no training records")
    index = {c: i for i, c in enumerate(model.class_names)}
    unknown = {s.label for s in train} - set(index)
    if unknown:
        raise ValueError(f"stage labels {sorted(unknown)} are not outputs of the model head {model.class_names}")
    _configure(config)
    device = _device(config)
    cache = cache or ImageCache(model.spec.input_size)
    epochs = epochs or config.epochs_per_stage

    paths = [s.record.image_path for s in train]
    labels = torch.tensor([index[s.label] for s in train], dtype=torch.long)
    weight = _class_weights(labels.tolist(), len(index)).to(device) if config.class_weights else None

    torch.manual_seed(config.seed * 1009 + stage_index)
    model.to(device)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    records = []
    for epoch in range(epochs):
        model.train()
        gen = torch.Generator().manual_seed(config.seed * 100_003 + stage_index * 1_000 + epoch)
        order = torch.randperm(len(paths), generator=gen)
        total, steps = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            x = cache.batch([paths[i] for i in idx.tolist()]).to(device)
            y = labels[idx].to(device)
            loss = F.cross_entropy(model(x), y, weight=weight)
            if not torch.isfinite(loss):
                raise TrainingAborted(f"non-finite loss {loss.item()} at stage {stage_index}, epoch {epoch}, step {steps}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            steps += 1
        rec = EpochRecord(stage_index, epoch, total / len(paths), steps)
        if val:
            rec.val = evaluate(model, val, cache, device=device).weighted
        logger.info("stage %d epoch %d loss %.4f val %s", stage_index, epoch, rec.train_loss, rec.val)
        records.append(rec)
    return model, records


def _split(manifest: DatasetManifest, split: str) -> DatasetManifest:
    return DatasetManifest(manifest.catalog, manifest.select(split))


def _probe(model: CapsuleNet, probe: torch.Tensor | None):
    if probe is None:
        return None
    model.eval()
    with torch.no_grad():
        return tuple(None if f is None else f.clone() for f in model.forward_features(probe))


def _same_features(a, b) -> bool:
    return all((x is None and y is None) or torch.equal(x, y) for x, y in zip(a, b))


def run_curriculum(
    manifest: DatasetManifest,
    schedule: CurriculumSchedule,
    spec: ModelSpec,
    config: TrainConfig,
    checkpoint_dir: str | os.PathLike | None = None,
) -> tuple[CapsuleNet, TrainingLog]:
    """Train stage by stage, widening the head between stages and keeping the backbone."""
    start = time.perf_counter()
    train, val = _split(manifest, "train"), _split(manifest, "val")
    cache = ImageCache(spec.input_size)
    log = TrainingLog("curriculum", config.seed, asdict(config), schedule=schedule.to_dict())
    probe_paths = [r.image_path for r in (val.records or train.records)[:8]]
    probe = cache.batch(probe_paths).to(_device(config))

    model = None
    for stage in schedule:
        if model is None:
            first = ModelSpec(**{**asdict(spec), "num_classes": len(stage.label_space)})
            model = build_model(first, stage.label_space, seed=config.seed)
            preserved = None
        else:
            before = _probe(model, probe)
            model = expand_head(model, stage.label_space, copy_overlap=True, seed=config.seed + stage.index)
            preserved = _same_features(before, _probe(model, probe))
            if not preserved:
                raise RuntimeError(f"backbone changed while expanding the head for stage {stage.index}")
        staged_val = stage_manifest(val, stage) if val.records else None
        model, records = train_stage(model, stage_manifest(train, stage), config, staged_val, stage.index, cache)
        log.epochs.extend(records)
        log.stages.append({**stage.to_dict(), "head_width": len(model.class_names), "backbone_preserved": preserved})
        if checkpoint_dir is not None:
            save_checkpoint(model, Path(checkpoint_dir) / f"stage_{stage.index:02d}.pt", stage.index)

    if val.records:
        report = evaluate(model, stage_manifest(val, schedule.final), cache, f"{spec.architecture} (curriculum)", _device(config))
        log.final_report = report.to_dict()
    log.wall_time = time.perf_counter() - start
    return model, log


def run_direct(
    manifest: DatasetManifest,
    spec: ModelSpec,
    config: TrainConfig,
    total_epochs: int | None = None,
    checkpoint_dir: str | os.PathLike | None = None,
) -> tuple[CapsuleNet, TrainingLog]:
    """Single stage over the full catalog.

    The default budget matches a curriculum run: epochs_per_stage times the
    number of curriculum stages (abnormal classes + 1).
    """
    start = time.perf_counter()
    catalog = manifest.catalog
    stage = final_stage(catalog)
    if total_epochs is None:
        total_epochs = config.epochs_per_stage * (len(catalog.abnormal) + 1)
    train, val = _split(manifest, "train"), _split(manifest, "val")
    cache = ImageCache(spec.input_size)
    log = TrainingLog("direct", config.seed, asdict(config))
    model = build_model(ModelSpec(**{**asdict(spec), "num_classes": len(catalog.classes)}), catalog.classes, seed=config.seed)
    staged_val = stage_manifest(val, stage) if val.records else None
    model, records = train_stage(model, stage_manifest(train, stage), config, staged_val, 0, cache, epochs=total_epochs)
    log.epochs.extend(records)
    log.stages.append({**stage.to_dict(), "index": 0, "head_width": len(model.class_names)})
    if checkpoint_dir is not None:
        save_checkpoint(model, Path(checkpoint_dir) / "direct.pt", 0)
    if staged_val:
        log.final_report = evaluate(model, staged_val, cache, f"{spec.architecture} (direct)", _device(config)).to_dict()
    log.wall_time = time.perf_counter() - start
    return model, log


def final_f1(log: TrainingLog) -> float:
    if log.final_report is None:
        return math.nan
    return log.final_report["weighted"]["f1"]
