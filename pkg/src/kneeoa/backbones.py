"""Uniform interface over the ten classification backbones plus `tiny`.

Real backbones come from torchvision with the final classification layer
swapped to the requested class count; `mobilenet` resolves to MobileNetV2 and
`efficientnet` to EfficientNet-B0. The `tiny` backbone is a small seeded
convolutional net used for desk-scale testing. Checkpoints are versioned
containers holding the spec, the weights, and training metadata.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn as nn

CHECKPOINT_FORMAT_VERSION = 1


class RegistryError(ValueError):
    """Raised for names outside the backbone registry."""


@dataclass
class BackboneSpec:
    name: str
    num_classes: int = 5
    pretrained: bool = False

    def __post_init__(self) -> None:
        if self.name not in REGISTRY:
            raise RegistryError(
                f"unknown backbone {self.name!r}; known: {sorted(REGISTRY)}"
            )
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")


class TinyConvNet(nn.Module):
    """Two conv blocks plus a position-sensitive linear head.

    The head flattens a 14x14 feature map instead of global pooling, so the
    network can learn spatially encoded classes; `features` is the target
    layer for activation maps.
    """

    def __init__(self, num_classes: int = 5, init_seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(init_seed)
        self.features = nn.Sequential(
            nn.Conv2d(3, 8, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(4),
            nn.Conv2d(8, 16, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(4),
        )
        self.head = nn.Linear(16 * 14 * 14, num_classes)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_uniform_(m.weight, a=5**0.5, generator=gen)
                nn.init.zeros_(m.bias)
        # zero head: initial logits are 0 and trained gradients carry all the
        # class signal, which keeps activation maps clean
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.features(x)
        return self.head(torch.flatten(x, 1))


def _build_torchvision(name: str, num_classes: int, pretrained: bool) -> nn.Module:
    import torchvision.models as tvm

    weights = "DEFAULT" if pretrained else None
    try:
        if name == "resnet18":
            m = tvm.resnet18(weights=weights)
        elif name == "resnet34":
            m = tvm.resnet34(weights=weights)
        elif name == "resnet50":
            m = tvm.resnet50(weights=weights)
        elif name == "vgg16":
            m = tvm.vgg16(weights=weights)
        elif name == "vgg19":
            m = tvm.vgg19(weights=weights)
        elif name == "mobilenet":
            m = tvm.mobilenet_v2(weights=weights)
        elif name == "densenet121":
            m = tvm.densenet121(weights=weights)
        elif name == "densenet161":
            m = tvm.densenet161(weights=weights)
        elif name == "efficientnet":
            m = tvm.efficientnet_b0(weights=weights)
        elif name == "googlenet":
            if weights is None:
                m = tvm.googlenet(weights=None, aux_logits=False, init_weights=True)
            else:
                m = tvm.googlenet(weights=weights)
                m.aux_logits = False
                m.aux1 = m.aux2 = None
        else:  # pragma: no cover - registry guards this
            raise RegistryError(name)
    except Exception as exc:
        if pretrained:
            raise RuntimeError(
                f"pretrained weights unavailable for {name!r}: {exc}"
            ) from exc
        raise

    # swap the classification head to emit num_classes logits
    if name.startswith("resnet") or name == "googlenet":
        m.fc = nn.Linear(m.fc.in_features, num_classes)
    elif name.startswith("vgg"):
        m.classifier[6] = nn.Linear(m.classifier[6].in_features, num_classes)
    elif name in ("mobilenet", "efficientnet"):
        m.classifier[-1] = nn.Linear(m.classifier[-1].in_features, num_classes)
    elif name.startswith("densenet"):
        m.classifier = nn.Linear(m.classifier.in_features, num_classes)
    return m


REGISTRY = {
    "resnet18": _build_torchvision,
    "resnet34": _build_torchvision,
    "resnet50": _build_torchvision,
    "vgg16": _build_torchvision,
    "vgg19": _build_torchvision,
    "mobilenet": _build_torchvision,
    "densenet121": _build_torchvision,
    "densenet161": _build_torchvision,
    "efficientnet": _build_torchvision,
    "googlenet": _build_torchvision,
    "tiny": None,
}


def create_backbone(spec: BackboneSpec, init_seed: int = 0) -> nn.Module:
    """Build a model that maps 224x224x3 batches to num_classes logits."""
    if spec.name == "tiny":
        model = TinyConvNet(spec.num_classes, init_seed=init_seed)
    else:
        model = _build_torchvision(spec.name, spec.num_classes, spec.pretrained)
    model.backbone_spec = spec
    model.eval()
    return model


def target_layer(model: nn.Module, name: str) -> nn.Module:
    """Resolve the default target layer (last conv feature map) per backbone."""
    if name == "tiny":
        return model.features
    if name.startswith("resnet"):
        return model.layer4
    if name.startswith(("vgg", "densenet")) or name in ("mobilenet", "efficientnet"):
        return model.features
    if name == "googlenet":
        return model.inception5b
    raise RegistryError(f"unknown backbone {name!r}")


def to_batch(images: np.ndarray | list[np.ndarray]) -> torch.Tensor:
    """Stack HxWx3 arrays into an NCHW float tensor."""
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    if arr.ndim != 4 or arr.shape[3] != 3:
        raise ValueError(f"expected N x H x W x 3 images, got shape {arr.shape}")
    return torch.from_numpy(arr.transpose(0, 3, 1, 2)).contiguous()


def forward(model: nn.Module, images: np.ndarray | list[np.ndarray]) -> np.ndarray:
    """Eval-mode forward pass; returns an (N, num_classes) logits array."""
    if len(images) == 0:
        raise ValueError("batch must be non-empty")
    batch = to_batch(images)
    model.eval()
    with torch.no_grad():
        logits = model(batch)
    return logits.numpy()


def save_checkpoint(
    path: str | Path,
    spec: BackboneSpec,
    state_dict: dict[str, torch.Tensor],
    meta: dict[str, Any],
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "spec": asdict(spec),
            "state_dict": state_dict,
            "meta": dict(meta),
        },
        path,
    )


def load_checkpoint(path: str | Path) -> dict[str, Any]:
    ckpt = torch.load(Path(path), map_location="cpu", weights_only=False)
    if ckpt.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(
            f"unsupported checkpoint format {ckpt.get('format_version')!r}"
        )
    return ckpt


def model_from_checkpoint(ckpt: dict[str, Any]) -> tuple[nn.Module, BackboneSpec]:
    spec = BackboneSpec(**ckpt["spec"])
    model = create_backbone(spec)
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model, spec
