"""Training protocol: Adam, step-decay LR, best-validation checkpointing.

Every model trains for the configured number of epochs (no early stopping)
with cross-entropy loss; the learning rate starts at base_lr and is scaled by
lr_decay_factor every lr_decay_every epochs. After each epoch, validation
accuracy is computed without augmentation; the checkpoint keeps the weights
of the epoch with the highest validation accuracy (ties go to the earliest
epoch). Runs are bit-reproducible given the seed in single-worker mode.
"""

from __future__ import annotations

import copy
import csv
import hashlib
from dataclasses import asdict, dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import backbones, metrics, sampling
from .data import AugmentationConfig, DatasetManifest, augment, load_image


class TrainingError(RuntimeError):
    """Raised when a run cannot proceed (empty split, non-finite loss)."""


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 28
    base_lr: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 5
    sampling_mode: str = "uniform"
    seed: int = 0
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must be in (0, 1]")
        if self.lr_decay_every < 1:
            raise ValueError("lr_decay_every must be >= 1")
        if self.sampling_mode not in ("uniform", "inverse_frequency"):
            raise ValueError(f"unknown sampling_mode {self.sampling_mode!r}")
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentationConfig(**self.augmentation)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        aug = d.get("augmentation")
        if isinstance(aug, dict):
            aug = dict(aug)
            for key in ("brightness_range", "saturation_range"):
                if key in aug:
                    aug[key] = tuple(aug[key])
            d["augmentation"] = AugmentationConfig(**aug)
        return cls(**d)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """base_lr * decay_factor ** floor(epoch / decay_every), zero-based.

    Evaluated in decimal so a factor-of-10 decay lands exactly on 1e-5,
    1e-6, ... instead of accumulating binary rounding error.
    """
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} out of range [0, {cfg.epochs})")
    k = epoch // cfg.lr_decay_every
    return float(Decimal(repr(cfg.base_lr)) * Decimal(repr(cfg.lr_decay_factor)) ** k)


@dataclass
class TrainHistory:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_accuracy: float = 0.0

    def record(self, epoch: int, lr: float, train_loss: float, val_accuracy: float):
        self.epochs.append(
            {
                "epoch": epoch,
                "lr": lr,
                "train_loss": train_loss,
                "val_accuracy": val_accuracy,
            }
        )

    def write_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "lr", "train_loss", "val_accuracy"])
            for row in self.epochs:
                writer.writerow(
                    [
                        row["epoch"],
                        repr(row["lr"]),
                        repr(row["train_loss"]),
                        repr(row["val_accuracy"]),
                    ]
                )


class ImageCache:
    """Preprocessed images for one manifest, loaded once and kept in memory."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self.images = [load_image(r.image_path) for r in manifest.records]
        self.labels = np.array([r.grade for r in manifest.records], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.images)


def _epoch_indices(cfg: TrainConfig, cache: ImageCache, epoch: int) -> np.ndarray:
    n = len(cache)
    if cfg.sampling_mode == "inverse_frequency":
        weights = sampling.inverse_frequency_weights(
            cache.manifest.class_counts, cache.manifest.grades()
        )
        return sampling.weighted_sample(
            weights, n, seed=(cfg.seed * 1_000_003 + epoch) & 0xFFFFFFFF
        )
    rng = np.random.default_rng([cfg.seed & 0xFFFFFFFF, epoch & 0xFFFFFFFF])
    return rng.permutation(n)


def _predict(model: nn.Module, images: list[np.ndarray], batch_size: int = 64):
    logits = []
    model.eval()
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            batch = backbones.to_batch(images[i : i + batch_size])
            logits.append(model(batch).numpy())
    return np.concatenate(logits)


def _val_accuracy(model: nn.Module, cache: ImageCache) -> float:
    preds = _predict(model, cache.images).argmax(axis=1)
    return float((preds == cache.labels).mean())


def train(
    model: nn.Module,
    train_manifest: DatasetManifest,
    val_manifest: DatasetManifest,
    cfg: TrainConfig,
) -> tuple[dict, TrainHistory]:
    """Run the full protocol; returns (checkpoint dict, history)."""
    if len(train_manifest) == 0 or len(val_manifest) == 0:
        raise TrainingError("train and val manifests must be non-empty")

    torch.manual_seed(cfg.seed)
    train_cache = ImageCache(train_manifest)
    val_cache = ImageCache(val_manifest)

    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.base_lr)
    loss_fn = nn.CrossEntropyLoss()
    history = TrainHistory()
    best_state = copy.deepcopy(model.state_dict())
    best_acc = -1.0
    best_epoch = 0

    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = _epoch_indices(cfg, train_cache, epoch)

        model.train()
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            imgs = [
                augment(train_cache.images[i], cfg.augmentation, int(i), epoch)
                for i in idx
            ]
            x = backbones.to_batch(imgs)
            y = torch.from_numpy(train_cache.labels[idx])
            optimizer.zero_grad()
            loss = loss_fn(model(x), y)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}"
                )
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))

        val_acc = _val_accuracy(model, val_cache)
        history.record(epoch, lr, float(np.mean(losses)), val_acc)
        if val_acc > best_acc:
            best_acc = val_acc
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())

    history.best_epoch = best_epoch
    history.best_val_accuracy = best_acc

    spec = getattr(model, "backbone_spec", None)
    checkpoint = {
        "format_version": backbones.CHECKPOINT_FORMAT_VERSION,
        "spec": asdict(spec) if spec is not None else None,
        "state_dict": best_state,
        "meta": {
            "epoch": best_epoch,
            "val_accuracy": best_acc,
            "seed": cfg.seed,
            "config": cfg.to_dict(),
        },
    }
    return checkpoint, history


def evaluate(checkpoint: dict | str | Path, manifest: DatasetManifest) -> metrics.RunResult:
    """Forward every sample without augmentation; argmax logits as prediction."""
    if len(manifest) == 0:
        raise TrainingError("evaluation manifest must be non-empty")
    if not isinstance(checkpoint, dict):
        checkpoint = backbones.load_checkpoint(checkpoint)
    model, _ = backbones.model_from_checkpoint(checkpoint)
    cache = ImageCache(manifest)
    preds = _predict(model, cache.images).argmax(axis=1)
    return metrics.RunResult.from_predictions(preds.tolist(), cache.labels.tolist())


def repeat_runs(
    run: Callable[[int], metrics.RunResult], seeds: Sequence[int]
) -> metrics.AggregateResult:
    """Execute the run once per seed and aggregate accuracy and per-class F1."""
    if len(seeds) < 1:
        raise ValueError("at least one seed required")
    results = [run(seed) for seed in seeds]
    return metrics.aggregate(results)


def split_fingerprint(manifest: DatasetManifest) -> str:
    """Stable hash of (path, grade) pairs; guards ensemble members against
    evaluating on different test sets."""
    h = hashlib.sha256()
    for r in sorted(manifest.records, key=lambda r: r.image_path):
        h.update(f"{r.image_path}\t{r.grade}\n".encode())
    return h.hexdigest()


def write_run_dir(
    out_dir: str | Path,
    checkpoint: dict,
    history: TrainHistory,
    result: metrics.RunResult,
    test_split_sha256: str | None = None,
) -> Path:
    """Lay out runs/<experiment>/<backbone>/<seed>/ artifacts."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.save(checkpoint, out_dir / "checkpoint.pt")
    history.write_csv(out_dir / "history.csv")
    payload = result.to_dict()
    if test_split_sha256 is not None:
        payload["test_split_sha256"] = test_split_sha256
    metrics.write_json(payload, out_dir / "metrics.json")
    return out_dir
