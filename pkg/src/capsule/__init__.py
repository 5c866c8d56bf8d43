"""Tiered augmentation balancing and scarcity-ordered curriculum training."""

from .catalog import ClassCatalog, ClassStats, DatasetManifest, SampleRecord, compute_stats, generate_synthetic, ingest
from .curriculum import CurriculumSchedule, Stage, build_schedule, remap_label, stage_manifest
from .metrics import ConfusionMatrix, MetricsReport, confusion, render_comparison, weighted_report

__version__ = "0.1.0"
