"""Location classifier over part embeddings and view discriminator over feature maps."""

from __future__ import annotations

import torch
import torch.nn as nn

from .config import ConfigError, HeadConfig, PoolMode


class LocationClassifier(nn.Module):
    """Four independent branches of dropout + linear; returns logits (B, 4, C)."""

    def __init__(self, d_embed: int, num_locations: int, num_parts: int = 4, dropout: float = 0.5):
        super().__init__()
        if num_locations < 2:
            raise ConfigError("need at least 2 locations to classify")
        self.branches = nn.ModuleList(
            nn.Sequential(nn.Dropout(dropout), nn.Linear(d_embed, num_locations)) for _ in range(num_parts)
        )

    def forward(self, parts: torch.Tensor) -> torch.Tensor:
        return torch.stack([b(parts[:, i]) for i, b in enumerate(self.branches)], dim=1)

    def probs(self, parts: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self(parts), dim=-1)


def _conv_block(c_in: int, c_out: int, kernel: int, downsample: bool, pool: PoolMode, norm: bool) -> nn.Sequential:
    pad = kernel // 2
    stride = 2 if downsample and pool is PoolMode.STRIDED_CONV else 1
    layers: list[nn.Module] = [nn.Conv2d(c_in, c_out, kernel, stride=stride, padding=pad)]
    if downsample and pool is not PoolMode.STRIDED_CONV:
        layers.append(nn.MaxPool2d(2) if pool is PoolMode.MAX_POOL else nn.AvgPool2d(2))
    if norm:
        # batch statistics only: no running buffers, so a frozen discriminator stays bit-identical
        layers.append(nn.BatchNorm2d(c_out, track_running_stats=False))
    layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


class ViewDiscriminator(nn.Module):
    """Three conv blocks (the last two halve resolution), global average pool, 2-way linear.

    ``forward`` returns logits ordered [UAV, SATELLITE]; ``probs`` the softmax.
    """

    def __init__(self, in_channels: int, in_size: int, cfg: HeadConfig | None = None):
        super().__init__()
        cfg = cfg or HeadConfig()
        widths = cfg.disc_channels or (in_channels // 2, in_channels // 4, in_channels // 8)
        if min(widths) < 1:
            raise ConfigError(f"discriminator widths {widths} too small for {in_channels} input channels")
        if in_size % 4:
            raise ConfigError(f"discriminator input side {in_size} must be divisible by 4")
        self.in_channels = in_channels
        self.in_size = in_size
        self.blocks = nn.Sequential(
            _conv_block(in_channels, widths[0], cfg.disc_kernel, False, cfg.disc_pool, cfg.disc_norm),
            _conv_block(widths[0], widths[1], cfg.disc_kernel, True, cfg.disc_pool, cfg.disc_norm),
            _conv_block(widths[1], widths[2], cfg.disc_kernel, True, cfg.disc_pool, cfg.disc_norm),
        )
        self.fc = nn.Linear(widths[2], 2)

    def features(self, maps: torch.Tensor) -> torch.Tensor:
        if maps.dim() != 4 or maps.shape[1:] != (self.in_channels, self.in_size, self.in_size):
            raise ConfigError(
                f"discriminator expects (B, {self.in_channels}, {self.in_size}, {self.in_size}), "
                f"got {tuple(maps.shape)}"
            )
        return self.blocks(maps)

    def forward(self, maps: torch.Tensor) -> torch.Tensor:
        return self.fc(self.features(maps).mean(dim=(2, 3)))

    def probs(self, maps: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self(maps), dim=-1)
