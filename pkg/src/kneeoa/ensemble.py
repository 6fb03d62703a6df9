"""Model fusion: softmax-sum voting and the shallow stacker network.

Voting converts each member's logits to probabilities, sums them, and takes
the argmax (ties break toward the lower grade). The stacker concatenates
member logits into one vector (50-dimensional for ten 5-class members) and
feeds a two-layer fully connected network trained with the same protocol as
the base models.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn as nn

from .backbones import CHECKPOINT_FORMAT_VERSION
from .training import TrainConfig, TrainHistory, TrainingError, lr_at_epoch


def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax along the last axis."""
    x = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("logits must be finite")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def soft_vote(member_logits: Sequence[np.ndarray]) -> tuple[int, np.ndarray]:
    """Sum member softmax probabilities; argmax wins, ties to the lower grade.

    Returns (predicted grade, summed distribution divided by member count).
    """
    if len(member_logits) == 0:
        raise ValueError("at least one member required")
    arity = len(member_logits[0])
    if any(len(l) != arity for l in member_logits):
        raise ValueError("member logits must share arity")
    summed = np.zeros(arity, dtype=np.float64)
    for logits in member_logits:
        summed += softmax(logits)
    return int(np.argmax(summed)), summed / len(member_logits)


def soft_vote_batch(member_logits: Sequence[np.ndarray]) -> np.ndarray:
    """Vectorized voting over (N, C) member logit arrays; returns (N,) preds."""
    probs = sum(softmax(np.asarray(l)) for l in member_logits)
    return probs.argmax(axis=1)


def concat_logits(member_logits: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenate member logits in member order (10 x 5 -> 50)."""
    if len(member_logits) == 0:
        raise ValueError("at least one member required")
    arity = len(member_logits[0])
    if any(len(l) != arity for l in member_logits):
        raise ValueError("member logits must share arity")
    return np.concatenate([np.asarray(l, dtype=np.float64) for l in member_logits])


@dataclass
class StackerSpec:
    input_dim: int
    hidden_dim: int = 64
    output_dim: int = 5

    def __post_init__(self) -> None:
        if min(self.input_dim, self.hidden_dim, self.output_dim) < 1:
            raise ValueError("all stacker dimensions must be >= 1")


class Stacker(nn.Module):
    """Two affine layers with a ReLU between."""

    def __init__(self, spec: StackerSpec):
        super().__init__()
        self.spec = spec
        self.net = nn.Sequential(
            nn.Linear(spec.input_dim, spec.hidden_dim),
            nn.ReLU(inplace=True),
            nn.Linear(spec.hidden_dim, spec.output_dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def train_stacker(
    spec: StackerSpec,
    inputs: Sequence[np.ndarray],
    labels: Sequence[int],
    cfg: TrainConfig,
    val_inputs: Sequence[np.ndarray] | None = None,
    val_labels: Sequence[int] | None = None,
) -> tuple[dict, TrainHistory]:
    """Train the stacker with Adam and the step-decay schedule.

    Best-validation checkpointing mirrors the base training protocol; without
    a validation set, the training data selects the checkpoint.
    """
    if len(inputs) == 0 or len(inputs) != len(labels):
        raise TrainingError("inputs and labels must be aligned and non-empty")
    x = np.stack([np.asarray(v, dtype=np.float32) for v in inputs])
    if x.shape[1] != spec.input_dim:
        raise ValueError(f"input dim {x.shape[1]} != spec.input_dim {spec.input_dim}")
    y = np.asarray(labels, dtype=np.int64)
    if val_inputs is None:
        xv, yv = x, y
    else:
        xv = np.stack([np.asarray(v, dtype=np.float32) for v in val_inputs])
        yv = np.asarray(val_labels, dtype=np.int64)

    torch.manual_seed(cfg.seed)
    model = Stacker(spec)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.base_lr)
    loss_fn = nn.CrossEntropyLoss()
    history = TrainHistory()
    best_state = copy.deepcopy(model.state_dict())
    best_acc = -1.0
    best_epoch = 0

    xt = torch.from_numpy(x)
    yt = torch.from_numpy(y)
    xvt = torch.from_numpy(xv)

    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        rng = np.random.default_rng([cfg.seed & 0xFFFFFFFF, epoch & 0xFFFFFFFF])
        order = rng.permutation(len(x))

        model.train()
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            optimizer.zero_grad()
            loss = loss_fn(model(xt[idx]), yt[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite stacker loss at epoch {epoch}")
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))

        model.eval()
        with torch.no_grad():
            val_acc = float((model(xvt).argmax(dim=1).numpy() == yv).mean())
        history.record(epoch, lr, float(np.mean(losses)), val_acc)
        if val_acc > best_acc:
            best_acc = val_acc
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())

    history.best_epoch = best_epoch
    history.best_val_accuracy = best_acc
    checkpoint = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "stacker_spec": asdict(spec),
        "state_dict": best_state,
        "meta": {
            "epoch": best_epoch,
            "val_accuracy": best_acc,
            "seed": cfg.seed,
            "hidden_dim": spec.hidden_dim,
        },
    }
    return checkpoint, history


def stacker_from_checkpoint(ckpt: dict) -> Stacker:
    spec = StackerSpec(**ckpt["stacker_spec"])
    model = Stacker(spec)
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model


def predict_stacked(ckpt: dict, inputs: np.ndarray) -> np.ndarray | int:
    """Argmax of stacker logits; accepts one vector or an (N, D) batch."""
    model = stacker_from_checkpoint(ckpt)
    arr = np.asarray(inputs, dtype=np.float32)
    single = arr.ndim == 1
    if single:
        arr = arr[None]
    if arr.shape[1] != model.spec.input_dim:
        raise ValueError(
            f"input length {arr.shape[1]} != stacker input_dim {model.spec.input_dim}"
        )
    with torch.no_grad():
        preds = model(torch.from_numpy(arr)).argmax(dim=1).numpy()
    return int(preds[0]) if single else preds


def write_ensemble_manifest(
    path: str | Path,
    member_checkpoints: Sequence[str],
    strategy: str,
    stacker_checkpoint: str | None = None,
) -> None:
    """Ordered member list + strategy (vote|stack) + optional stacker path."""
    if strategy not in ("vote", "stack"):
        raise ValueError(f"unknown strategy {strategy!r}")
    payload: dict[str, Any] = {
        "members": list(member_checkpoints),
        "strategy": strategy,
    }
    if stacker_checkpoint is not None:
        payload["stacker_checkpoint"] = stacker_checkpoint
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def read_ensemble_manifest(path: str | Path) -> dict:
    with open(path, encoding="utf-8") as f:
        return json.load(f)
