"""Residual critic with pixel normalisation and growing kernels.

``C -> B (n_d residual blocks) -> H (adaptive avg-pool, two dense layers,
sigmoid)``.  Convolutions inside ``B`` use padding 1 whatever the kernel
size, so a block with kernel ``k`` shrinks each spatial side by
``2 * (k - 3)``; the skip path center-crops to match.
"""
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import ConfigurationError, ShapeError

MIN_INPUT_SIZE = 32


@dataclass(frozen=True)
class DiscriminatorConfig:
    n_d: int = 4
    stem_filters: int = 64
    block_filters: tuple = (64, 128, 256, 512)
    block_kernels: tuple = (3, 5, 7, 9)
    leak: float = 0.2
    pool_out: int = 6
    dense_hidden: int = 1024
    separable: bool = True
    head_norm: bool = False
    pixel_norm_eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "block_filters", tuple(self.block_filters))
        object.__setattr__(self, "block_kernels", tuple(self.block_kernels))
        if not (self.n_d == len(self.block_filters) == len(self.block_kernels)):
            raise ConfigurationError("n_d, block_filters and block_kernels must agree in length")
        if not 0.0 < self.leak < 1.0:
            raise ConfigurationError(f"leak must lie in (0, 1), got {self.leak}")
        if any(k < 3 or k % 2 == 0 for k in self.block_kernels):
            raise ConfigurationError("block kernels must be odd and >= 3")

    def to_dict(self):
        d = asdict(self)
        d["block_filters"] = list(self.block_filters)
        d["block_kernels"] = list(self.block_kernels)
        return d

    @property
    def total_shrink(self):
        return sum(2 * (k - 3) for k in self.block_kernels)


def pixel_norm(x, eps=1e-8):
    """Scale every per-location channel vector to unit mean square (NCHW)."""
    return x * torch.rsqrt(x.pow(2).mean(dim=1, keepdim=True) + eps)


class PixelNorm(nn.Module):
    def __init__(self, eps=1e-8):
        super().__init__()
        self.eps = eps

    def forward(self, x):
        return pixel_norm(x, self.eps)


def _critic_conv(c_in, c_out, kernel, separable):
    if not separable:
        return nn.Conv2d(c_in, c_out, kernel, padding=1)
    return nn.Sequential(
        nn.Conv2d(c_in, c_in, kernel, padding=1, groups=c_in),
        nn.Conv2d(c_in, c_out, 1),
    )


def center_crop(x, height, width):
    h, w = x.shape[-2:]
    top, left = (h - height) // 2, (w - width) // 2
    return x[..., top:top + height, left:left + width]


class CriticBlock(nn.Module):
    """conv-PixelNorm-LeakyReLU, conv-PixelNorm, joined with a projected skip."""

    def __init__(self, c_in, c_out, kernel, leak=0.2, separable=True, eps=1e-8):
        super().__init__()
        self.c_in = c_in
        self.conv1 = _critic_conv(c_in, c_out, kernel, separable)
        self.conv2 = _critic_conv(c_out, c_out, kernel, separable)
        self.norm = PixelNorm(eps)
        self.leak = leak
        self.project = nn.Identity() if c_in == c_out else nn.Conv2d(c_in, c_out, 1)

    def forward(self, x):
        if x.shape[1] != self.c_in:
            raise ShapeError(f"critic block expects {self.c_in} channels, got {x.shape[1]}")
        r = F.leaky_relu(self.norm(self.conv1(x)), self.leak)
        r = self.norm(self.conv2(r))
        return center_crop(self.project(x), *r.shape[-2:]) + r


class Discriminator(nn.Module):
    """Maps (N, 3, H, W) with H, W >= 32 to N probabilities in (0, 1)."""

    def __init__(self, config=None):
        super().__init__()
        cfg = config or DiscriminatorConfig()
        self.config = cfg
        self.stem = nn.Conv2d(3, cfg.stem_filters, 3, padding=1)
        blocks, c_in = [], cfg.stem_filters
        for c_out, k in zip(cfg.block_filters, cfg.block_kernels):
            blocks.append(CriticBlock(c_in, c_out, k, cfg.leak, cfg.separable, cfg.pixel_norm_eps))
            c_in = c_out
        self.blocks = nn.Sequential(*blocks)
        self.pool = nn.AdaptiveAvgPool2d(cfg.pool_out)
        self.fc1 = nn.Linear(c_in * cfg.pool_out ** 2, cfg.dense_hidden)
        self.head_norm = nn.LayerNorm(cfg.dense_hidden) if cfg.head_norm else None
        self.fc2 = nn.Linear(cfg.dense_hidden, 1)

    def logits(self, x):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"discriminator expects (N, 3, H, W), got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if min(h, w) < MIN_INPUT_SIZE:
            raise ShapeError(f"discriminator input must be at least {MIN_INPUT_SIZE}x{MIN_INPUT_SIZE}, got {h}x{w}")
        x = F.leaky_relu(self.stem(x), self.config.leak)
        x = self.pool(self.blocks(x)).flatten(1)
        x = self.fc1(x)
        if self.head_norm is not None:
            x = self.head_norm(x)
        x = F.leaky_relu(x, self.config.leak)
        return self.fc2(x).squeeze(1)

    def forward(self, x):
        return torch.sigmoid(self.logits(x))
