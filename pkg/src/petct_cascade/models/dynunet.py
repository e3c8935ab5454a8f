"""Self-configuring U-Net in the nnU-Net mould.

Per-level strides are derived from the patch: an axis is halved while it
stays even and at least ``min_size`` after halving, so anisotropic patches
get anisotropic downsampling.
"""

from __future__ import annotations

from typing import List, Sequence, Tuple

from torch import nn

from .blocks import UnetBasicBlock, UnetUpBlock


def derive_strides(patch_size: Sequence[int], max_depth: int, min_size: int = 4) -> List[Tuple[int, int, int]]:
    sizes = list(patch_size)
    strides = []
    for _ in range(max_depth):
        s = tuple(2 if n % 2 == 0 and n // 2 >= min_size else 1 for n in sizes)
        if s == (1, 1, 1):
            break
        strides.append(s)
        sizes = [n // k for n, k in zip(sizes, s)]
    return strides


class DynUNet(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, filters: Sequence[int], strides: Sequence[Tuple[int, int, int]]):
        super().__init__()
        filters = list(filters)[: len(strides) + 1]
        self.strides = list(strides)
        self.input_block = UnetBasicBlock(in_channels, filters[0])
        self.downs = nn.ModuleList(
            UnetBasicBlock(filters[i], filters[i + 1], stride=s) for i, s in enumerate(self.strides)
        )
        self.ups = nn.ModuleList(
            UnetUpBlock(filters[i + 1], filters[i], filters[i], stride=s) for i, s in enumerate(self.strides)
        )
        self.head = nn.Conv3d(filters[0], out_channels, 1)

    def forward(self, x):
        skips = [self.input_block(x)]
        for down in self.downs:
            skips.append(down(skips[-1]))
        x = skips.pop()
        for up in reversed(self.ups):
            x = up(x, skips.pop())
        return self.head(x)
