"""Dataset manifests, stratified splitting, preprocessing, and augmentation.

A manifest is a CSV with columns ``image_path,kl_grade,subject_id[,split]``.
Splitting is stratified per grade with largest-remainder rounding, so split
sizes are deterministic and testable. Augmentation draws its randomness from
a stream keyed by (seed, epoch, sample_index), making parallel data loading
bit-identical to serial.
"""

from __future__ import annotations

import csv
import random
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torchvision.transforms.functional as TF

IMAGE_SIZE = 224

SPLITS = ("train", "val", "test")


class ManifestError(ValueError):
    """Raised for malformed manifest files or invalid records."""


class KLGrade(IntEnum):
    """Kellgren-Lawrence osteoarthritis severity grade."""

    NONE = 0
    DOUBTFUL = 1
    MINIMAL = 2
    MODERATE = 3
    SEVERE = 4


NUM_GRADES = len(KLGrade)


@dataclass
class SampleRecord:
    image_path: str
    grade: int
    subject_id: str
    split: str = "unassigned"

    def __post_init__(self) -> None:
        if not self.image_path:
            raise ManifestError("image_path must be non-empty")
        if self.grade not in range(NUM_GRADES):
            raise ManifestError(f"kl_grade must be in 0..4, got {self.grade}")
        if self.split not in SPLITS + ("unassigned",):
            raise ManifestError(f"unknown split {self.split!r}")


@dataclass
class DatasetManifest:
    records: list[SampleRecord] = field(default_factory=list)

    @property
    def class_counts(self) -> dict[int, int]:
        counts = {g: 0 for g in range(NUM_GRADES)}
        for r in self.records:
            counts[r.grade] += 1
        return counts

    def subset(self, split: str) -> "DatasetManifest":
        return DatasetManifest([r for r in self.records if r.split == split])

    def grades(self) -> list[int]:
        return [r.grade for r in self.records]

    def __len__(self) -> int:
        return len(self.records)


def load_manifest(path: str | Path) -> DatasetManifest:
    """Read a manifest CSV. Errors name the offending line number."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    records: list[SampleRecord] = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        required = {"image_path", "kl_grade", "subject_id"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ManifestError(
                f"{path}: header must contain {sorted(required)}, "
                f"got {reader.fieldnames}"
            )
        for lineno, row in enumerate(reader, start=2):
            try:
                grade = int(row["kl_grade"])
                rec = SampleRecord(
                    image_path=row["image_path"],
                    grade=grade,
                    subject_id=row["subject_id"],
                    split=row.get("split") or "unassigned",
                )
            except (ValueError, ManifestError) as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
            records.append(rec)
    return DatasetManifest(records)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["image_path", "kl_grade", "subject_id", "split"])
        for r in manifest.records:
            writer.writerow([r.image_path, r.grade, r.subject_id, r.split])


def largest_remainder_allocation(n: int, ratios: Sequence[float]) -> list[int]:
    """Split n items into len(ratios) buckets with largest-remainder rounding.

    Remainder ties go to the earlier bucket, so train is favored over val
    over test.
    """
    total = float(sum(ratios))
    if total <= 0:
        raise ValueError("ratios must sum to a positive value")
    exact = [n * r / total for r in ratios]
    floors = [int(e) for e in exact]
    shortfall = n - sum(floors)
    remainders = sorted(
        range(len(ratios)), key=lambda i: (-(exact[i] - floors[i]), i)
    )
    for i in remainders[:shortfall]:
        floors[i] += 1
    return floors


def stratified_split(
    manifest: DatasetManifest,
    ratios: Sequence[float] = (7, 1, 2),
    seed: int = 0,
    group_by_subject: bool = False,
) -> DatasetManifest:
    """Assign train/val/test per grade following ratios.

    Within each grade, records are shuffled by a seed-derived stream and
    allocated with largest-remainder rounding. With ``group_by_subject`` all
    images of one subject land in one split (per-grade sizes then only
    approximate the ratios). Record order of the output matches the input.
    """
    if len(ratios) != 3:
        raise ValueError("ratios must have exactly three entries")
    if any(r.split != "unassigned" for r in manifest.records):
        raise ManifestError("stratified_split requires all records unassigned")

    assignment: dict[int, str] = {}
    if group_by_subject:
        # subjects are atomic: stratify them by modal grade, then fill the
        # split with the largest remaining image-count deficit
        subjects: dict[str, list[int]] = {}
        for i, r in enumerate(manifest.records):
            subjects.setdefault(r.subject_id, []).append(i)
        strata: dict[int, list[str]] = {g: [] for g in range(NUM_GRADES)}
        for sid, idxs in subjects.items():
            grades = [manifest.records[i].grade for i in idxs]
            modal = max(set(grades), key=grades.count)
            strata[modal].append(sid)
        for grade, sids in strata.items():
            if not sids:
                continue
            rng = random.Random(f"{seed}:{grade}")
            order = sorted(sids)
            rng.shuffle(order)
            n_images = sum(len(subjects[s]) for s in sids)
            targets = largest_remainder_allocation(n_images, ratios)
            filled = [0, 0, 0]
            for sid in order:
                k = max(range(3), key=lambda j: (targets[j] - filled[j], -j))
                for i in subjects[sid]:
                    assignment[i] = SPLITS[k]
                filled[k] += len(subjects[sid])
    else:
        by_grade: dict[int, list[int]] = {g: [] for g in range(NUM_GRADES)}
        for i, r in enumerate(manifest.records):
            by_grade[r.grade].append(i)
        for grade, indices in by_grade.items():
            if not indices:
                continue
            rng = random.Random(f"{seed}:{grade}")
            shuffled = list(indices)
            rng.shuffle(shuffled)
            sizes = largest_remainder_allocation(len(shuffled), ratios)
            pos = 0
            for split_name, size in zip(SPLITS, sizes):
                for i in shuffled[pos : pos + size]:
                    assignment[i] = split_name
                pos += size

    new_records = [
        replace(r, split=assignment.get(i, r.split))
        for i, r in enumerate(manifest.records)
    ]
    return DatasetManifest(new_records)


def preprocess(image: np.ndarray) -> np.ndarray:
    """Resize to 224x224x3 with bilinear resampling, values in [0, 1].

    Accepts HxW, HxWx1, or HxWx3 arrays; integer dtypes are scaled by 255,
    floats are assumed already in [0, 1] and clipped. Grayscale inputs are
    replicated to three channels.
    """
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"expected HxW or HxWx{{1,3}} image, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError("image has zero-sized dimension")
    if np.issubdtype(arr.dtype, np.integer):
        arr = arr.astype(np.float32) / 255.0
    else:
        arr = np.clip(arr.astype(np.float32), 0.0, 1.0)
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    if arr.shape[:2] != (IMAGE_SIZE, IMAGE_SIZE):
        t = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]
        t = torch.nn.functional.interpolate(
            t, size=(IMAGE_SIZE, IMAGE_SIZE), mode="bilinear", align_corners=False
        )
        arr = t[0].numpy().transpose(1, 2, 0)
    return np.clip(arr, 0.0, 1.0)


def load_image(path: str | Path) -> np.ndarray:
    """Decode a PNG/JPEG file to a preprocessed 224x224x3 array."""
    from PIL import Image

    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            arr = np.asarray(im)
    except Exception as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from exc
    return preprocess(arr)


@dataclass
class AugmentationConfig:
    hflip_prob: float = 0.5
    brightness_range: tuple[float, float] = (0.5, 1.2)
    saturation_range: tuple[float, float] = (0.5, 1.5)
    max_rotation_deg: float = 5.0
    max_translate_frac: float = 0.10
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must be in [0, 1]")
        for name in ("brightness_range", "saturation_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} low must be <= high")
        if self.max_rotation_deg < 0:
            raise ValueError("max_rotation_deg must be >= 0")
        if not 0.0 <= self.max_translate_frac <= 1.0:
            raise ValueError("max_translate_frac must be in [0, 1]")

    @classmethod
    def identity(cls, seed: int = 0) -> "AugmentationConfig":
        """A configuration under which augment() is the identity map."""
        return cls(
            hflip_prob=0.0,
            brightness_range=(1.0, 1.0),
            saturation_range=(1.0, 1.0),
            max_rotation_deg=0.0,
            max_translate_frac=0.0,
            seed=seed,
        )


def _uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    u = rng.random()
    return lo + (hi - lo) * u


def augment(
    image: np.ndarray,
    cfg: AugmentationConfig,
    sample_index: int,
    epoch: int,
) -> np.ndarray:
    """Apply flip, brightness, saturation, rotation, and translation in order.

    The random stream depends only on (cfg.seed, epoch, sample_index), so the
    result is reproducible and independent of iteration order. An identity
    configuration returns the input pixelwise unchanged.
    """
    rng = np.random.default_rng(
        [cfg.seed & 0xFFFFFFFF, epoch & 0xFFFFFFFF, sample_index & 0xFFFFFFFF]
    )
    # always draw the full variate set so the stream layout is config-independent
    u_flip = rng.random()
    f_bright = _uniform(rng, *cfg.brightness_range)
    f_sat = _uniform(rng, *cfg.saturation_range)
    angle = _uniform(rng, -cfg.max_rotation_deg, cfg.max_rotation_deg)
    tx = _uniform(rng, -cfg.max_translate_frac, cfg.max_translate_frac)
    ty = _uniform(rng, -cfg.max_translate_frac, cfg.max_translate_frac)

    out = np.asarray(image, dtype=np.float32)
    if u_flip < cfg.hflip_prob:
        out = out[:, ::-1, :].copy()
    if f_bright != 1.0:
        out = np.clip(out * f_bright, 0.0, 1.0)
    if f_sat != 1.0:
        gray = out @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
        out = np.clip(gray[:, :, None] + f_sat * (out - gray[:, :, None]), 0.0, 1.0)
    if angle != 0.0 or tx != 0.0 or ty != 0.0:
        h, w = out.shape[:2]
        t = torch.from_numpy(np.ascontiguousarray(out.transpose(2, 0, 1)))
        t = TF.affine(
            t,
            angle=angle,
            translate=[tx * w, ty * h],
            scale=1.0,
            shear=[0.0, 0.0],
            interpolation=TF.InterpolationMode.BILINEAR,
            fill=[0.0],
        )
        out = np.clip(t.numpy().transpose(1, 2, 0), 0.0, 1.0)
    return out
