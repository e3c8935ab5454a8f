"""Residual encoder-decoder with group norm and additive skips (no VAE branch)."""

from __future__ import annotations

from typing import Sequence

from torch import nn


def _gn(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch), ch)


class ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.body = nn.Sequential(
            _gn(ch),
            nn.ReLU(inplace=False),
            nn.Conv3d(ch, ch, 3, padding=1, bias=False),
            _gn(ch),
            nn.ReLU(inplace=True),
            nn.Conv3d(ch, ch, 3, padding=1, bias=False),
        )

    def forward(self, x):
        return x + self.body(x)


class SegResNet(nn.Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        init_filters: int = 32,
        blocks_down: Sequence[int] = (1, 2, 2, 4),
        blocks_up: Sequence[int] = (1, 1, 1),
    ):
        super().__init__()
        if len(blocks_up) != len(blocks_down) - 1:
            raise ValueError("blocks_up must have one entry fewer than blocks_down")
        f = init_filters
        self.conv_init = nn.Conv3d(in_channels, f, 3, padding=1, bias=False)
        self.down_layers = nn.ModuleList()
        for i, n in enumerate(blocks_down):
            ch = f * 2**i
            pre = nn.Conv3d(ch // 2, ch, 3, stride=2, padding=1, bias=False) if i > 0 else nn.Identity()
            self.down_layers.append(nn.Sequential(pre, *[ResBlock(ch) for _ in range(n)]))
        self.up_samples = nn.ModuleList()
        self.up_layers = nn.ModuleList()
        depth = len(blocks_down)
        for i, n in enumerate(blocks_up):
            ch = f * 2 ** (depth - 1 - i)
            self.up_samples.append(
                nn.Sequential(
                    nn.Conv3d(ch, ch // 2, 1, bias=False),
                    nn.Upsample(scale_factor=2, mode="trilinear", align_corners=False),
                )
            )
            self.up_layers.append(nn.Sequential(*[ResBlock(ch // 2) for _ in range(n)]))
        self.head = nn.Sequential(_gn(f), nn.ReLU(inplace=True), nn.Conv3d(f, out_channels, 1))

    def forward(self, x):
        x = self.conv_init(x)
        skips = []
        for down in self.down_layers:
            x = down(x)
            skips.append(x)
        skips.pop()
        for up, layer in zip(self.up_samples, self.up_layers):
            x = layer(up(x) + skips.pop())
        return self.head(x)
