"""Patient-disjoint splitting and severity-balanced batching."""

from __future__ import annotations

import math

import numpy as np

from ..errors import ConfigurationError, DataError, RequestError
from ..rng import substream
from .manifest import Manifest, SampleRecord, relabel

LEVELS = (1, 2)


def split_by_patient(manifest: Manifest, test_image_count: int, rng_seed: int) -> Manifest:
    """Move whole patients, in seeded random order, to test until it holds
    at least ``test_image_count`` images; everyone else goes to train."""
    total = len(manifest)
    if test_image_count < 0 or test_image_count > total:
        raise RequestError(f"test_image_count {test_image_count} not in [0, {total}]")
    by_patient: dict[str, list[str]] = {}
    for r in manifest.records:
        by_patient.setdefault(r.patient_id, []).append(r.image_path)
    patients = sorted(by_patient)
    order = substream(rng_seed, 0x5E11).permutation(len(patients))
    splits = {r.image_path: "train" for r in manifest.records}
    n_test = 0
    for idx in order:
        if n_test >= test_image_count:
            break
        for path in by_patient[patients[idx]]:
            splits[path] = "test"
        n_test += len(by_patient[patients[idx]])
    return relabel(manifest, splits)


def epoch_length(majority: int, batch_size: int) -> int:
    return math.ceil(majority / (batch_size // 2))


def balanced_batches(manifest: Manifest, batch_size: int, rng_seed: int, epoch: int = 0,
                     split: str | None = "train") -> list[list[SampleRecord]]:
    """One epoch of batches holding ``batch_size / 2`` images of each level.

    The epoch has ceil(majority / (batch_size / 2)) batches. Each level is a
    shuffled full pass over its images, padded with draws with replacement
    to fill every slot, so every image appears at least once per epoch and the
    minority level is oversampled.
    """
    if batch_size < 2 or batch_size % len(LEVELS):
        raise ConfigurationError(f"batch_size {batch_size} is not divisible by {len(LEVELS)}")
    records = manifest.split(split)
    pools = {lvl: [r for r in records if r.level == lvl] for lvl in LEVELS}
    for lvl, pool in pools.items():
        if not pool:
            raise DataError(f"no Level {lvl} images in split {split!r}")
    half = batch_size // 2
    n_batches = epoch_length(max(len(p) for p in pools.values()), batch_size)
    slots = n_batches * half
    picks = {}
    for lvl, pool in pools.items():
        rng = substream(rng_seed, 0xBA7C, epoch, lvl)
        order = rng.permutation(len(pool))
        extra = rng.integers(0, len(pool), size=slots - len(pool))
        picks[lvl] = np.concatenate([order, extra])
    return [
        [pools[lvl][i] for lvl in LEVELS for i in picks[lvl][b * half:(b + 1) * half]]
        for b in range(n_batches)
    ]
