from .manifest import (
    Manifest, SampleRecord, format_stats, manifest_stats, read_manifest, severity_from_zones,
    write_manifest,
)
from .pgm import read_pgm, write_pgm
from .sampling import balanced_batches, split_by_patient
from .synthetic import generate_synthetic
from .transforms import AugmentDraw, augment, crop_rows, preprocess, random_draw

__all__ = [
    "AugmentDraw", "Manifest", "SampleRecord", "augment", "balanced_batches", "crop_rows",
    "format_stats", "generate_synthetic", "manifest_stats", "preprocess", "random_draw",
    "read_manifest", "read_pgm", "severity_from_zones", "split_by_patient", "write_manifest",
    "write_pgm",
]
