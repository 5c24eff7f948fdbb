"""Sample records, manifest CSV I/O, severity grading and cohort statistics."""

from __future__ import annotations

import csv
import math
import numbers
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

from ..errors import DataError, IneligibleSampleError, InputError, RangeError

COLUMNS = ("image_path", "patient_id", "zones_opacified", "split", "age", "sex", "view")
SPLITS = ("train", "test", "unassigned")
SEXES = ("M", "F")
VIEWS = ("AP", "PA", "unknown")
AGE_BINS = ("<20", "20-29", "30-39", "40-49", "50-59", "60-69", "70-79", "80-89", "90+")


def severity_from_zones(zones: int) -> int:
    """Level 1 for 1-2 opacified lung zones, Level 2 for 3-6."""
    if not isinstance(zones, numbers.Integral) or isinstance(zones, bool):
        raise RangeError(f"zone count must be an integer, got {zones!r}")
    if zones < 0 or zones > 6:
        raise RangeError(f"zone count {zones} outside [0, 6]")
    if zones == 0:
        raise IneligibleSampleError("zone count 0: image has no opacities and is not gradable")
    return 1 if zones <= 2 else 2


@dataclass(frozen=True)
class SampleRecord:
    image_path: str
    patient_id: str
    zones_opacified: int
    split: str = "unassigned"
    age: int | None = None
    sex: str | None = None
    view: str | None = None

    def __post_init__(self):
        if not 0 <= self.zones_opacified <= 6:
            raise RangeError(f"{self.image_path}: zone count {self.zones_opacified} outside [0, 6]")
        if self.split not in SPLITS:
            raise DataError(f"{self.image_path}: unknown split {self.split!r}")
        if self.sex is not None and self.sex not in SEXES:
            raise DataError(f"{self.image_path}: unknown sex {self.sex!r}")
        if self.view is not None and self.view not in VIEWS:
            raise DataError(f"{self.image_path}: unknown view {self.view!r}")

    @property
    def level(self) -> int:
        return severity_from_zones(self.zones_opacified)


@dataclass
class Manifest:
    records: list[SampleRecord]
    root: Path = field(default_factory=lambda: Path("."))

    def __post_init__(self):
        self.root = Path(self.root)
        seen = set()
        for r in self.records:
            if r.image_path in seen:
                raise DataError(f"duplicate image_path {r.image_path!r} in manifest")
            seen.add(r.image_path)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def split(self, name: str | None) -> list[SampleRecord]:
        return [r for r in self.records if name is None or r.split == name]

    def resolve(self, record: SampleRecord) -> Path:
        p = Path(record.image_path)
        return p if p.is_absolute() else self.root / p

    def with_records(self, records) -> Manifest:
        return Manifest(list(records), self.root)

    def level_counts(self, split: str | None = None) -> dict[int, int]:
        c = Counter(r.level for r in self.split(split))
        return {1: c.get(1, 0), 2: c.get(2, 0)}


def _opt(value: str):
    return value.strip() or None


def read_manifest(path) -> Manifest:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != COLUMNS:
            raise InputError(f"{path}: header must be {','.join(COLUMNS)}, got {reader.fieldnames}")
        records = []
        for lineno, row in enumerate(reader, start=2):
            try:
                age = _opt(row["age"])
                records.append(SampleRecord(
                    image_path=row["image_path"],
                    patient_id=row["patient_id"],
                    zones_opacified=int(row["zones_opacified"]),
                    split=_opt(row["split"]) or "unassigned",
                    age=int(age) if age is not None else None,
                    sex=_opt(row["sex"]),
                    view=_opt(row["view"]),
                ))
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from exc
    return Manifest(records, path.parent)


def write_manifest(manifest: Manifest, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in manifest.records:
            w.writerow([r.image_path, r.patient_id, r.zones_opacified, r.split,
                        "" if r.age is None else r.age, r.sex or "", r.view or ""])


def relabel(manifest: Manifest, splits: dict[str, str]) -> Manifest:
    """Copy of ``manifest`` with record splits replaced per image_path."""
    return manifest.with_records(replace(r, split=splits.get(r.image_path, r.split))
                                 for r in manifest.records)


def age_bin(age: int) -> str:
    if age < 20:
        return "<20"
    if age >= 90:
        return "90+"
    lo = age // 10 * 10
    return f"{lo}-{lo + 9}"


def manifest_stats(manifest: Manifest) -> dict:
    """Cohort summary: age and sex per patient, imaging view per image.

    Age std is the population standard deviation over patients with a
    recorded age; a patient's age is taken from their first record that has one.
    """
    ages: dict[str, int] = {}
    sexes: dict[str, str] = {}
    patients = []
    for r in manifest.records:
        if r.patient_id not in patients:
            patients.append(r.patient_id)
        if r.age is not None:
            ages.setdefault(r.patient_id, r.age)
        if r.sex is not None:
            sexes.setdefault(r.patient_id, r.sex)
    values = list(ages.values())
    mean = sum(values) / len(values) if values else None
    std = math.sqrt(sum((a - mean) ** 2 for a in values) / len(values)) if values else None
    hist = Counter(age_bin(a) for a in values)
    views = Counter(r.view or "unknown" for r in manifest.records)
    sex_counts = Counter(sexes.values())
    return {
        "patients": len(patients),
        "images": len(manifest.records),
        "age_mean": mean,
        "age_std": std,
        "age_histogram": {b: hist.get(b, 0) for b in AGE_BINS},
        "sex": {s: sex_counts.get(s, 0) for s in SEXES},
        "view": {v: views.get(v, 0) for v in VIEWS},
    }


def format_stats(stats: dict) -> str:
    def pct(n, total):
        return f"{n} ({100.0 * n / total:.1f}%)" if total else str(n)

    n_aged = sum(stats["age_histogram"].values())
    n_sexed = sum(stats["sex"].values())
    lines = [f"patients  {stats['patients']}", f"images    {stats['images']}"]
    if stats["age_mean"] is not None:
        lines.append(f"age       {stats['age_mean']:.2f} +/- {stats['age_std']:.2f}")
    for b, n in stats["age_histogram"].items():
        lines.append(f"  {b:<7} {pct(n, n_aged)}")
    lines.append("sex")
    for s, n in stats["sex"].items():
        lines.append(f"  {s:<7} {pct(n, n_sexed)}")
    lines.append("view")
    for v, n in stats["view"].items():
        lines.append(f"  {v:<7} {pct(n, stats['images'])}")
    return "\n".join(lines)
