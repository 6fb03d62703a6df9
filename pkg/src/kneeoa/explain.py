"""Smooth-GradCAM++ saliency maps and heatmap overlays.

GradCAM++ channel weights use the closed-form alpha coefficients built from
second- and third-order gradient terms of the target score, combined with
rectified first-order gradients; the weighted channel sum is rectified into a
nonnegative map. Smoothing averages that map over noise-perturbed copies of
the input before upsampling to the input size and min-max normalizing to
[0, 1] (identically-zero maps stay zero).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import backbones

EPS = 1e-12


class TargetLayerError(ValueError):
    """Raised when the requested target layer cannot be resolved."""


@dataclass
class CamConfig:
    n_samples: int = 25
    noise_sigma: float = 0.15
    target_layer: str | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def list_layers(model: nn.Module) -> list[str]:
    return [name for name, _ in model.named_modules() if name]


def resolve_target_layer(model: nn.Module, name: str | None) -> nn.Module:
    """Named module lookup; None falls back to the backbone default."""
    if name is None:
        spec = getattr(model, "backbone_spec", None)
        if spec is None:
            raise TargetLayerError(
                "no target layer given and model carries no backbone spec"
            )
        return backbones.target_layer(model, spec.name)
    modules = dict(model.named_modules())
    if name not in modules:
        raise TargetLayerError(
            f"target layer {name!r} not found; available: {list_layers(model)}"
        )
    return modules[name]


def _gradcampp_raw(
    model: nn.Module, x: torch.Tensor, target_class: int, layer: nn.Module
) -> torch.Tensor:
    """One unrectified-resolution GradCAM++ map (nonnegative, feature-map size)."""
    activations: list[torch.Tensor] = []

    def hook(_module, _inputs, output):
        activations.append(output)

    handle = layer.register_forward_hook(hook)
    try:
        model.eval()
        logits = model(x)
    finally:
        handle.remove()
    if not activations:
        raise TargetLayerError("target layer produced no activations")
    acts = activations[-1]
    if acts.ndim != 4:
        raise TargetLayerError(
            f"target layer output must be a conv feature map, got shape {tuple(acts.shape)}"
        )
    score = logits[0, target_class]
    grads = torch.autograd.grad(score, acts, retain_graph=False, allow_unused=False)[0]

    g, a = grads[0], acts.detach()[0]
    g2 = g * g
    g3 = g2 * g
    denom = 2.0 * g2 + (a * g3).sum(dim=(1, 2), keepdim=True)
    alpha = torch.where(g2.abs() > 0, g2 / (denom + EPS), torch.zeros_like(g2))
    weights = (alpha * F.relu(g)).sum(dim=(1, 2))
    cam = F.relu((weights[:, None, None] * a).sum(dim=0))
    return cam


def _finalize(cam: torch.Tensor, out_hw: tuple[int, int]) -> np.ndarray:
    up = F.interpolate(
        cam[None, None], size=out_hw, mode="bilinear", align_corners=False
    )[0, 0]
    up = F.relu(up)  # bilinear can undershoot at edges
    m = float(up.max())
    if m > 0:
        up = up / m
    return up.numpy()


def _prepare_input(image: np.ndarray) -> torch.Tensor:
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected preprocessed HxWx3 image, got shape {arr.shape}")
    t = torch.from_numpy(arr.transpose(2, 0, 1))[None]
    t.requires_grad_(True)
    return t


def gradcampp(
    model: nn.Module,
    image: np.ndarray,
    target_class: int,
    target_layer: str | None = None,
) -> np.ndarray:
    """Plain GradCAM++ map, upsampled to the input size and normalized."""
    layer = resolve_target_layer(model, target_layer)
    x = _prepare_input(image)
    cam = _gradcampp_raw(model, x, target_class, layer)
    return _finalize(cam.detach(), image.shape[:2])


def smooth_gradcampp(
    model: nn.Module,
    image: np.ndarray,
    target_class: int,
    cfg: CamConfig,
) -> np.ndarray:
    """Average GradCAM++ over noise-perturbed inputs, then upsample + normalize."""
    layer = resolve_target_layer(model, cfg.target_layer)
    arr = np.asarray(image, dtype=np.float32)
    value_range = float(arr.max() - arr.min())
    noise_std = cfg.noise_sigma * value_range
    rng = np.random.default_rng(cfg.seed & 0xFFFFFFFF)

    total: torch.Tensor | None = None
    for _ in range(cfg.n_samples):
        noisy = arr
        if noise_std > 0:
            noisy = arr + rng.normal(0.0, noise_std, size=arr.shape).astype(np.float32)
        x = _prepare_input(noisy)
        cam = _gradcampp_raw(model, x, target_class, layer).detach()
        total = cam if total is None else total + cam
    avg = total / cfg.n_samples
    return _finalize(avg, arr.shape[:2])


def overlay(image: np.ndarray, saliency: np.ndarray, alpha: float) -> np.ndarray:
    """Alpha-blend the jet-colormapped saliency onto the image; uint8 RGB out."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    img = np.asarray(image, dtype=np.float64)
    sal = np.asarray(saliency, dtype=np.float64)
    if img.shape[:2] != sal.shape:
        raise ValueError(f"shape mismatch: image {img.shape[:2]} vs map {sal.shape}")
    import matplotlib

    cmap = matplotlib.colormaps["jet"]
    colored = cmap(np.clip(sal, 0.0, 1.0))[:, :, :3]
    blended = (1.0 - alpha) * img + alpha * colored
    return (np.clip(blended, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def save_overlay_png(overlay_rgb: np.ndarray, path: str | Path) -> None:
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(overlay_rgb).save(path)
