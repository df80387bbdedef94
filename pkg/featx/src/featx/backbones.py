"""Vision backbones behind one contract: images in, finite feature rows out.

Available names:
  tiny                seeded untrained convnet, 64-d; fast, fully offline,
                      used by the test suite
  resnet50            torchvision 50-layer residual network, ImageNet
                      weights (needs torchvision + downloadable weights),
                      2048-d pooled features
  resnet50-untrained  same architecture, seeded random init; offline
  clip                contrastive image-text encoder via open_clip or
                      transformers if installed (needs downloadable weights)
"""

from __future__ import annotations

import torch
from torch import nn


class TinyConvNet(nn.Module):
    def __init__(self, dim: int = 64):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 8, kernel_size=7, stride=4, padding=3),
            nn.ReLU(),
            nn.Conv2d(8, 16, kernel_size=5, stride=4, padding=2),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(4),
        )
        self.head = nn.Linear(16 * 16, dim)

    def forward(self, x):
        z = self.features(x)
        return self.head(z.flatten(1))


def _resnet50(pretrained: bool, seed: int) -> tuple[nn.Module, int]:
    try:
        from torchvision.models import ResNet50_Weights, resnet50
    except ImportError as exc:
        raise RuntimeError("backbone resnet50 needs torchvision (pip install featx[resnet])") from exc
    if pretrained:
        model = resnet50(weights=ResNet50_Weights.IMAGENET1K_V1)
    else:
        torch.manual_seed(seed)
        model = resnet50(weights=None)
    model.fc = nn.Identity()
    return model, 2048


def _clip(seed: int) -> tuple[nn.Module, int]:
    try:
        from transformers import CLIPVisionModelWithProjection
    except ImportError as exc:
        raise RuntimeError("backbone clip needs the transformers package") from exc

    inner = CLIPVisionModelWithProjection.from_pretrained("openai/clip-vit-base-patch32")

    class ClipWrapper(nn.Module):
        def __init__(self):
            super().__init__()
            self.inner = inner

        def forward(self, x):
            return self.inner(pixel_values=x).image_embeds

    return ClipWrapper(), int(inner.config.projection_dim)


def build_backbone(name: str, seed: int = 0) -> tuple[nn.Module, int]:
    """Instantiate a backbone in eval mode; returns (module, feature dim)."""
    if name == "tiny":
        torch.manual_seed(seed)
        model, dim = TinyConvNet(), 64
    elif name == "resnet50":
        model, dim = _resnet50(pretrained=True, seed=seed)
    elif name == "resnet50-untrained":
        model, dim = _resnet50(pretrained=False, seed=seed)
    elif name == "clip":
        model, dim = _clip(seed)
    else:
        raise ValueError(f"unknown backbone {name!r}")
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model, dim
