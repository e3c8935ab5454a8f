"""Residual U-Net: residual units in every encoder/decoder stage, strided
convolutions instead of pooling, transposed convolutions for upsampling."""

from __future__ import annotations

from typing import Sequence

import torch
from torch import nn

from .blocks import instance_norm


class ResidualUnit(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, subunits: int = 2, last_conv_only: bool = False):
        super().__init__()
        layers = []
        ch = in_ch
        for i in range(subunits):
            conv_only = last_conv_only and i == subunits - 1
            layers.append(nn.Conv3d(ch, out_ch, 3, stride=stride if i == 0 else 1, padding=1, bias=conv_only))
            if not conv_only:
                layers += [instance_norm(out_ch), nn.PReLU()]
            ch = out_ch
        self.conv = nn.Sequential(*layers)
        if stride != 1 or in_ch != out_ch:
            k = 3 if stride != 1 else 1
            self.residual = nn.Conv3d(in_ch, out_ch, k, stride=stride, padding=k // 2)
        else:
            self.residual = nn.Identity()

    def forward(self, x):
        return self.conv(x) + self.residual(x)


class _SkipCat(nn.Module):
    def __init__(self, inner: nn.Module):
        super().__init__()
        self.inner = inner

    def forward(self, x):
        return torch.cat([x, self.inner(x)], dim=1)


class UNet(nn.Module):
    """``len(channels) - 1`` downsamplings by 2; stride product ``2 ** (len(channels) - 1)``."""

    def __init__(self, in_channels: int, out_channels: int, channels: Sequence[int], num_res_units: int = 2):
        super().__init__()
        self.net = self._block(in_channels, out_channels, list(channels), num_res_units, is_top=True)

    def _block(self, inc, outc, channels, n_res, is_top):
        c = channels[0]
        if len(channels) > 2:
            sub = self._block(c, c, channels[1:], n_res, is_top=False)
            upc = 2 * c
        else:
            sub = ResidualUnit(c, channels[1], stride=1, subunits=n_res)
            upc = c + channels[1]
        down = ResidualUnit(inc, c, stride=2, subunits=n_res)
        up = [nn.ConvTranspose3d(upc, outc, 3, stride=2, padding=1, output_padding=1, bias=is_top)]
        if not is_top:
            up += [instance_norm(outc), nn.PReLU()]
        up.append(ResidualUnit(outc, outc, stride=1, subunits=1, last_conv_only=is_top))
        return nn.Sequential(down, _SkipCat(sub), *up)

    def forward(self, x):
        return self.net(x)
