"""Small convolutional networks shared by the forge, the harness and the extractor."""

from __future__ import annotations

import math
from contextlib import contextmanager

import torch
import torch.nn as nn
import torch.nn.functional as F


@contextmanager
def seeded(seed: int):
    """Run a block under a forked global torch RNG seeded with ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        yield


class SmallConvNet(nn.Module):
    """Three-stage convnet: two pooled stages, a head stage, global pooling.

    ``features`` returns the activations after each stage so the same network
    serves as a classifier and as a perceptual feature extractor. SiLU keeps
    the input gradient smooth for finite-difference checks.
    """

    def __init__(self, channels: int = 3, num_classes: int = 4, width: int = 16):
        super().__init__()
        w = width
        self.stage1 = nn.Sequential(
            nn.Conv2d(channels, w, 3, padding=1), nn.SiLU(),
            nn.Conv2d(w, w, 3, padding=1), nn.SiLU(),
        )
        self.stage2 = nn.Sequential(
            nn.AvgPool2d(2),
            nn.Conv2d(w, 2 * w, 3, padding=1), nn.SiLU(),
            nn.Conv2d(2 * w, 2 * w, 3, padding=1), nn.SiLU(),
        )
        self.stage3 = nn.Sequential(
            nn.AvgPool2d(2),
            nn.Conv2d(2 * w, 4 * w, 3, padding=1), nn.SiLU(),
        )
        self.head = nn.Linear(4 * w, num_classes)
        self.channels = channels
        self.num_classes = num_classes
        self.width = width

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        h1 = self.stage1(x)
        h2 = self.stage2(h1)
        h3 = self.stage3(h2)
        return [h1, h2, h3]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x)[-1]
        return self.head(h.mean(dim=(2, 3)))


class ConvClassifier(nn.Module):
    """Batch-normalized ReLU convnet with max pooling, used as the classifier f."""

    def __init__(self, channels: int = 3, num_classes: int = 4, width: int = 16):
        super().__init__()
        w = width

        def block(cin, cout):
            return [nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU()]

        self.body = nn.Sequential(
            *block(channels, w), *block(w, w), nn.MaxPool2d(2),
            *block(w, 2 * w), *block(2 * w, 2 * w), nn.MaxPool2d(2),
            *block(2 * w, 4 * w),
        )
        self.head = nn.Linear(4 * w, num_classes)
        self.num_classes = num_classes

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.body(x).mean(dim=(2, 3)))


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half, 1)
    )
    args = t.to(torch.float32)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _groups(ch: int) -> int:
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class TinyUNet(nn.Module):
    """Two-resolution U-shaped epsilon predictor with sinusoidal time input.

    ``depth`` residual blocks per resolution on the way down and up.
    """

    def __init__(self, channels=3, base_width=32, depth=1, time_embedding_dim=64):
        super().__init__()
        self.time_embedding_dim = time_embedding_dim
        temb = 4 * base_width
        self.time_mlp = nn.Sequential(
            nn.Linear(time_embedding_dim, temb), nn.SiLU(), nn.Linear(temb, temb)
        )
        w1, w2 = base_width, 2 * base_width
        self.inp = nn.Conv2d(channels, w1, 3, padding=1)
        self.down1 = nn.ModuleList([ResBlock(w1, w1, temb) for _ in range(depth)])
        self.downsample = nn.Conv2d(w1, w1, 3, stride=2, padding=1)
        self.down2 = nn.ModuleList(
            [ResBlock(w1 if i == 0 else w2, w2, temb) for i in range(depth)]
        )
        self.mid = ResBlock(w2, w2, temb)
        self.up2 = nn.ModuleList(
            [ResBlock(2 * w2 if i == 0 else w2, w2, temb) for i in range(depth)]
        )
        self.upsample = nn.Conv2d(w2, w1, 3, padding=1)
        self.up1 = nn.ModuleList(
            [ResBlock(2 * w1 if i == 0 else w1, w1, temb) for i in range(depth)]
        )
        self.out_norm = nn.GroupNorm(_groups(w1), w1)
        self.out = nn.Conv2d(w1, channels, 3, padding=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        if t.ndim == 0:
            t = t.expand(x.shape[0])
        emb = self.time_mlp(timestep_embedding(t, self.time_embedding_dim).to(x.dtype))
        h = self.inp(x)
        for blk in self.down1:
            h = blk(h, emb)
        skip1 = h
        h = self.downsample(h)
        for blk in self.down2:
            h = blk(h, emb)
        skip2 = h
        h = self.mid(h, emb)
        h = torch.cat([h, skip2], dim=1)
        for blk in self.up2:
            h = blk(h, emb)
        h = self.upsample(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = torch.cat([h, skip1], dim=1)
        for blk in self.up1:
            h = blk(h, emb)
        return self.out(F.silu(self.out_norm(h)))
