"""Swin-transformer encoder with a convolutional U-shaped decoder.

Shifted-window attention follows the video/volumetric Swin layout: tokens
are padded to a window multiple, windows whose extent exceeds the feature map
shrink to the map and lose their shift.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .blocks import UnetResBlock, UnetUpBlock

Triple = Tuple[int, int, int]


def window_partition(x: torch.Tensor, ws: Triple) -> torch.Tensor:
    b, d, h, w, c = x.shape
    x = x.view(b, d // ws[0], ws[0], h // ws[1], ws[1], w // ws[2], ws[2], c)
    return x.permute(0, 1, 3, 5, 2, 4, 6, 7).reshape(-1, ws[0] * ws[1] * ws[2], c)


def window_reverse(windows: torch.Tensor, ws: Triple, b: int, d: int, h: int, w: int) -> torch.Tensor:
    x = windows.view(b, d // ws[0], h // ws[1], w // ws[2], ws[0], ws[1], ws[2], -1)
    return x.permute(0, 1, 4, 2, 5, 3, 6, 7).reshape(b, d, h, w, -1)


def effective_window(size: Triple, window: Triple, shift: Triple) -> Tuple[Triple, Triple]:
    ws, ss = list(window), list(shift)
    for i in range(3):
        if size[i] <= window[i]:
            ws[i], ss[i] = size[i], 0
    return tuple(ws), tuple(ss)


@lru_cache(maxsize=64)
def _relative_index(ws: Triple, table_window: Triple) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(*[torch.arange(n) for n in ws], indexing="ij")).flatten(1)
    rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0)
    for i in range(3):
        rel[..., i] += table_window[i] - 1
    m1 = (2 * table_window[1] - 1) * (2 * table_window[2] - 1)
    m2 = 2 * table_window[2] - 1
    return rel[..., 0] * m1 + rel[..., 1] * m2 + rel[..., 2]


@lru_cache(maxsize=64)
def _shift_mask(padded: Triple, ws: Triple, ss: Triple) -> torch.Tensor:
    img = torch.zeros(1, *padded, 1)
    cnt = 0
    ranges = [
        (slice(-ws[i]), slice(-ws[i], -ss[i]), slice(-ss[i], None)) if ss[i] else (slice(None),)
        for i in range(3)
    ]
    for a in ranges[0]:
        for b in ranges[1]:
            for c in ranges[2]:
                img[:, a, b, c, :] = cnt
                cnt += 1
    mw = window_partition(img, ws).squeeze(-1)
    mask = mw.unsqueeze(1) - mw.unsqueeze(2)
    return mask.masked_fill(mask != 0, -100.0).masked_fill(mask == 0, 0.0)


class WindowAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int, window: Triple):
        super().__init__()
        self.num_heads = num_heads
        self.window = window
        self.scale = (dim // num_heads) ** -0.5
        n_rel = (2 * window[0] - 1) * (2 * window[1] - 1) * (2 * window[2] - 1)
        self.bias_table = nn.Parameter(torch.zeros(n_rel, num_heads))
        nn.init.trunc_normal_(self.bias_table, std=0.02)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, ws: Triple, mask=None):
        bw, n, c = x.shape
        qkv = self.qkv(x).reshape(bw, n, 3, self.num_heads, c // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0] * self.scale, qkv[1], qkv[2]
        attn = q @ k.transpose(-2, -1)
        idx = _relative_index(ws, self.window).reshape(-1)
        bias = self.bias_table[idx].reshape(n, n, -1).permute(2, 0, 1)
        attn = attn + bias.unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(bw // nw, nw, self.num_heads, n, n) + mask[None, :, None]
            attn = attn.view(-1, self.num_heads, n, n)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bw, n, c)
        return self.proj(out)


class SwinBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, window: Triple, shifted: bool, mlp_ratio: float = 4.0):
        super().__init__()
        self.window = window
        self.shift = tuple(w // 2 for w in window) if shifted else (0, 0, 0)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads, window)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def _attend(self, x):
        b, d, h, w, c = x.shape
        ws, ss = effective_window((d, h, w), self.window, self.shift)
        pads = [(-n) % k for n, k in zip((d, h, w), ws)]
        x = F.pad(x, (0, 0, 0, pads[2], 0, pads[1], 0, pads[0]))
        dp, hp, wp = x.shape[1:4]
        mask = None
        if any(ss):
            x = torch.roll(x, shifts=tuple(-s for s in ss), dims=(1, 2, 3))
            mask = _shift_mask((dp, hp, wp), ws, ss)
        out = self.attn(window_partition(x, ws), ws, mask)
        x = window_reverse(out, ws, b, dp, hp, wp)
        if any(ss):
            x = torch.roll(x, shifts=ss, dims=(1, 2, 3))
        return x[:, :d, :h, :w].contiguous()

    def forward(self, x):
        x = x + self._attend(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class PatchMerging(nn.Module):
    """Concatenate 2x2x2 neighbourhoods and project 8C -> 2C."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(8 * dim)
        self.reduction = nn.Linear(8 * dim, 2 * dim, bias=False)

    def forward(self, x):
        d, h, w = x.shape[1:4]
        x = F.pad(x, (0, 0, 0, w % 2, 0, h % 2, 0, d % 2))
        parts = [x[:, i::2, j::2, k::2] for i in (0, 1) for j in (0, 1) for k in (0, 1)]
        return self.reduction(self.norm(torch.cat(parts, dim=-1)))


class SwinStage(nn.Module):
    def __init__(self, dim: int, depth: int, num_heads: int, window: Triple):
        super().__init__()
        self.blocks = nn.ModuleList(SwinBlock(dim, num_heads, window, shifted=i % 2 == 1) for i in range(depth))
        self.merge = PatchMerging(dim)

    def forward(self, x):
        for blk in self.blocks:
            x = blk(x)
        return self.merge(x)


def _channel_norm(x: torch.Tensor) -> torch.Tensor:
    """Parameter-free layer norm over channels of a (B, C, D, H, W) tensor."""
    x = x.permute(0, 2, 3, 4, 1)
    x = F.layer_norm(x, x.shape[-1:])
    return x.permute(0, 4, 1, 2, 3).contiguous()


class SwinUNETR(nn.Module):
    """Stride product is ``2 ** (len(depths) + 1)``: a stride-2 patch embedding
    followed by one patch merging per stage."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        feature_size: int = 48,
        depths: Sequence[int] = (2, 2, 2, 2),
        num_heads: Sequence[int] = (3, 6, 12, 24),
        window_size: int = 7,
    ):
        super().__init__()
        window = (window_size,) * 3
        fs = feature_size
        n = len(depths)
        self.patch_embed = nn.Conv3d(in_channels, fs, kernel_size=2, stride=2)
        self.stages = nn.ModuleList(
            SwinStage(fs * 2**i, depths[i], num_heads[i], window) for i in range(n)
        )
        # encoder k works on hidden state k (k=0: patch embedding); enc_in on the raw input
        self.enc_in = UnetResBlock(in_channels, fs)
        enc = []
        for k in range(n + 1):
            ch = fs * 2**k
            enc.append(UnetResBlock(ch, ch))
        self.encoders = nn.ModuleList(enc)
        dec = []
        for k in range(n, 0, -1):
            dec.append(UnetUpBlock(fs * 2**k, fs * 2 ** (k - 1), fs * 2 ** (k - 1), stride=2, res_block=True))
        dec.append(UnetUpBlock(fs, fs, fs, stride=2, res_block=True))
        self.decoders = nn.ModuleList(dec)
        self.head = nn.Conv3d(fs, out_channels, 1)

    def forward(self, x_in):
        x = self.patch_embed(x_in)
        hidden = [_channel_norm(x)]
        t = x.permute(0, 2, 3, 4, 1)
        for stage in self.stages:
            t = stage(t)
            hidden.append(_channel_norm(t.permute(0, 4, 1, 2, 3)))
        feats = [enc(h) for enc, h in zip(self.encoders, hidden)]
        skips = [self.enc_in(x_in)] + feats[:-1]
        x = feats[-1]
        for dec in self.decoders:
            x = dec(x, skips.pop())
        return self.head(x)
