"""Feature encoder: shared backbone, square-ring partition, per-ring refinement branches."""

from __future__ import annotations

import logging

import torch
import torch.nn as nn

from .config import Backbone, ConfigError, EncoderConfig

log = logging.getLogger(__name__)


class TinyCNN(nn.Module):
    """Four conv-BN-ReLU stages; only the first has stride 2."""

    def __init__(self, channels=(16, 32, 64, 64)):
        super().__init__()
        layers = []
        c_in = 3
        for i, c in enumerate(channels):
            layers += [
                nn.Conv2d(c_in, c, 3, stride=2 if i == 0 else 1, padding=1, padding_mode="reflect", bias=False),
                nn.BatchNorm2d(c),
                nn.ReLU(inplace=True),
            ]
            c_in = c
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


class ResNet50Backbone(nn.Module):
    """torchvision ResNet-50 up to the fifth conv block, optionally without its stride."""

    def __init__(self, remove_final_downsample: bool = True, pretrained: bool = True):
        super().__init__()
        import torchvision

        net = None
        self.pretrained_loaded = False
        if pretrained:
            try:
                net = torchvision.models.resnet50(weights=torchvision.models.ResNet50_Weights.IMAGENET1K_V1)
                self.pretrained_loaded = True
            except Exception as exc:  # offline, or no cached weights
                log.warning("ImageNet weights unavailable (%s); using random init", exc)
        if net is None:
            net = torchvision.models.resnet50(weights=None)
        if remove_final_downsample:
            net.layer4[0].conv2.stride = (1, 1)
            net.layer4[0].downsample[0].stride = (1, 1)
        self.body = nn.Sequential(
            net.conv1, net.bn1, net.relu, net.maxpool, net.layer1, net.layer2, net.layer3, net.layer4
        )

    def forward(self, x):
        return self.body(x)


def build_backbone(cfg: EncoderConfig) -> nn.Module:
    if cfg.backbone is Backbone.FULL_RESIDUAL_50:
        return ResNet50Backbone(cfg.remove_final_downsample, cfg.pretrained)
    return TinyCNN(cfg.tiny_channels)


def ring_masks(side: int, num_rings: int = 4) -> torch.Tensor:
    """Boolean masks (num_rings, side, side), innermost ring first.

    Ring ``l`` (1-indexed) is the annulus between the centred squares of side
    ``(l-1)*side/num_rings`` and ``l*side/num_rings``.
    """
    if side % (2 * num_rings):
        raise ConfigError(f"feature map side {side} not divisible by {2 * num_rings}")
    idx = torch.arange(side)
    # Chebyshev distance from the centre, in units of half-cells
    d = torch.maximum((2 * idx[:, None] + 1 - side).abs(), (2 * idx[None, :] + 1 - side).abs())
    step = side // num_rings
    ring = (d - 1) // step  # 0-based ring index
    return torch.stack([ring == i for i in range(num_rings)])


def square_ring_partition(maps: torch.Tensor, num_rings: int = 4) -> torch.Tensor:
    """Average-pool (B, C, H, W) maps over each square ring -> (B, num_rings, C)."""
    b, c, h, w = maps.shape
    if h != w:
        raise ConfigError(f"feature maps must be square, got {h}x{w}")
    masks = ring_masks(h, num_rings).to(maps.dtype)
    weights = masks / masks.sum(dim=(1, 2), keepdim=True)
    return torch.einsum("bchw,rhw->brc", maps, weights)


class PartRefine(nn.Module):
    """One branch: ``depth`` linear layers (ReLU between) then batch norm."""

    def __init__(self, in_dim: int, d_embed: int, depth: int = 1):
        super().__init__()
        layers: list[nn.Module] = []
        for i in range(depth):
            layers.append(nn.Linear(in_dim if i == 0 else d_embed, d_embed))
            if i < depth - 1:
                layers.append(nn.ReLU(inplace=True))
        layers.append(nn.BatchNorm1d(d_embed))
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


class FeatureEncoder(nn.Module):
    """Image -> (feature maps, part embeddings of shape (B, 4, d_embed))."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.backbone = build_backbone(cfg)
        self.branches = nn.ModuleList(
            PartRefine(cfg.feature_channels, cfg.d_embed, cfg.refine_depth) for _ in range(cfg.num_rings)
        )

    def backbone_forward(self, images: torch.Tensor) -> torch.Tensor:
        size = self.cfg.image_size
        if images.dim() != 4 or images.shape[1:] != (3, size, size):
            raise ConfigError(f"expected images of shape (B, 3, {size}, {size}), got {tuple(images.shape)}")
        return self.backbone(images)

    def refine(self, pooled: torch.Tensor) -> torch.Tensor:
        return torch.stack([branch(pooled[:, i]) for i, branch in enumerate(self.branches)], dim=1)

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        maps = self.backbone_forward(images)
        parts = self.refine(square_ring_partition(maps, self.cfg.num_rings))
        return maps, parts

    def param_groups(self) -> dict[str, list[nn.Parameter]]:
        return {
            "backbone": list(self.backbone.parameters()),
            "encoder_rest": list(self.branches.parameters()),
        }
