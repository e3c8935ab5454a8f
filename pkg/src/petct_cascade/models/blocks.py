"""Convolutional building blocks shared by the encoder-decoder networks."""

from __future__ import annotations

from typing import Sequence, Union

import torch
from torch import nn

Stride = Union[int, Sequence[int]]


def _triple(v: Stride):
    return (v, v, v) if isinstance(v, int) else tuple(int(s) for s in v)


def _is_unit(stride: Stride) -> bool:
    return all(s == 1 for s in _triple(stride))


def conv3d(in_ch: int, out_ch: int, kernel: int = 3, stride: Stride = 1, bias: bool = False) -> nn.Conv3d:
    stride = _triple(stride)
    # kernel 3 with padding 1 keeps size/stride exactly for even sizes
    return nn.Conv3d(in_ch, out_ch, kernel, stride=stride, padding=kernel // 2, bias=bias)


def instance_norm(ch: int) -> nn.InstanceNorm3d:
    return nn.InstanceNorm3d(ch, affine=True)


class UnetBasicBlock(nn.Module):
    """Two conv -> instance norm -> leaky ReLU layers; the first may stride."""

    def __init__(self, in_ch: int, out_ch: int, stride: Stride = 1):
        super().__init__()
        self.layers = nn.Sequential(
            conv3d(in_ch, out_ch, stride=stride),
            instance_norm(out_ch),
            nn.LeakyReLU(0.01, inplace=True),
            conv3d(out_ch, out_ch),
            instance_norm(out_ch),
            nn.LeakyReLU(0.01, inplace=True),
        )

    def forward(self, x):
        return self.layers(x)


class UnetResBlock(nn.Module):
    """Residual variant of :class:`UnetBasicBlock` with a projected shortcut."""

    def __init__(self, in_ch: int, out_ch: int, stride: Stride = 1):
        super().__init__()
        self.conv1 = conv3d(in_ch, out_ch, stride=stride)
        self.norm1 = instance_norm(out_ch)
        self.conv2 = conv3d(out_ch, out_ch)
        self.norm2 = instance_norm(out_ch)
        self.act = nn.LeakyReLU(0.01, inplace=True)
        self.shortcut = None
        if in_ch != out_ch or not _is_unit(stride):
            self.shortcut = nn.Sequential(
                nn.Conv3d(in_ch, out_ch, 1, stride=_triple(stride), bias=False), instance_norm(out_ch)
            )

    def forward(self, x):
        residual = x if self.shortcut is None else self.shortcut(x)
        out = self.act(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return self.act(out + residual)


class UnetUpBlock(nn.Module):
    """Transposed-conv upsampling, skip concatenation, then a conv block."""

    def __init__(self, in_ch: int, out_ch: int, skip_ch: int, stride: Stride = 2, res_block: bool = False):
        super().__init__()
        stride = _triple(stride)
        self.up = nn.ConvTranspose3d(in_ch, out_ch, kernel_size=stride, stride=stride, bias=False)
        block = UnetResBlock if res_block else UnetBasicBlock
        self.conv = block(out_ch + skip_ch, out_ch)

    def forward(self, x, skip):
        return self.conv(torch.cat([self.up(x), skip], dim=1))
