"""Progressive extension embedding: the DEG enhancer and the DEC head."""

from __future__ import annotations

from typing import NamedTuple, Optional, Sequence

import torch
import torch.nn as nn

from mean_cvgl.config import ConfigError
from mean_cvgl.layers import Dropout


class BranchOutput(NamedTuple):
    # embedding is the batch-normed pooled vector; logits come from the linear layer after dropout
    embedding: torch.Tensor
    logits: torch.Tensor


def dilated_conv(c_in: int, c_out: int, dilation: int, groups: int = 1) -> nn.Conv2d:
    """3x3 conv whose zero padding equals its dilation, so H and W are preserved."""
    return nn.Conv2d(c_in, c_out, 3, padding=dilation, dilation=dilation, groups=groups)


class DEG(nn.Module):
    """Diversified embedding generator.

    Three dilated 3x3 convs reduce C to C/4; their mean goes through ReLU and
    a 1x1 conv back to C. The result is emitted twice, each copy with its own
    dropout mask, and blended with the input as ``omega * (enhanced + f)``.
    """

    def __init__(self, channels: int, dilations: Sequence[int] = (1, 2, 3),
                 dropout: float = 0.1, omega_init: float = 1.0, activation: Optional[nn.Module] = None):
        super().__init__()
        if channels % 4:
            raise ConfigError(f"DEG needs channels divisible by 4, got {channels}")
        reduced = channels // 4
        self.convs = nn.ModuleList(dilated_conv(channels, reduced, d) for d in dilations)
        self.act = activation if activation is not None else nn.ReLU()
        self.fuse = nn.Conv2d(reduced, channels, 1)
        self.dropouts = nn.ModuleList([Dropout(dropout), Dropout(dropout)])
        self.omega = nn.Parameter(torch.tensor(float(omega_init)))

    def enhance(self, f):
        """The fused path before dropout: 1x1(ReLU(mean of dilated convs))."""
        mixed = sum(conv(f) for conv in self.convs) / len(self.convs)
        return self.fuse(self.act(mixed))

    def forward(self, f, generator: Optional[torch.Generator] = None):
        if f.shape[1] % 4:
            raise ConfigError(f"DEG input channels {f.shape[1]} not divisible by 4")
        fused = self.enhance(f)
        return tuple(self.omega * (drop(fused, generator) + f) for drop in self.dropouts)


class DEC(nn.Module):
    """Diversified embedding classifier.

    Four parallel paths (three dilated 3x3 convs and one 1x1 conv) each emit
    C/4 channels; their concatenation is average-pooled to 1x1, batch-normed,
    dropped out and classified. Works on any spatial size including 1x1.
    """

    def __init__(self, channels: int, num_classes: int, dilations: Sequence[int] = (1, 2, 3),
                 groups: int = 1, dropout: float = 0.1, path_channels: Optional[int] = None):
        super().__init__()
        if num_classes < 1:
            raise ConfigError("DEC needs at least one class")
        path = path_channels or channels // 4
        self.paths = nn.ModuleList(dilated_conv(channels, path, d, groups) for d in dilations)
        self.paths.append(nn.Conv2d(channels, path, 1))
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.embed_dim = path * len(self.paths)
        self.bn = nn.BatchNorm1d(self.embed_dim)
        self.dropout = Dropout(dropout)
        self.classifier = nn.Linear(self.embed_dim, num_classes)
        nn.init.kaiming_normal_(self.classifier.weight, mode="fan_out")
        nn.init.zeros_(self.classifier.bias)

    def pooled(self, f):
        cat = torch.cat([p(f) for p in self.paths], dim=1)
        return self.pool(cat).flatten(1)

    def forward(self, f, generator: Optional[torch.Generator] = None) -> BranchOutput:
        if f.dim() != 4 or min(f.shape[2:]) < 1:
            raise ValueError(f"DEC expects a non-empty (B, C, H, W) map, got {tuple(f.shape)}")
        emb = self.bn(self.pooled(f))
        logits = self.classifier(self.dropout(emb, generator))
        return BranchOutput(emb, logits)


class PEE(nn.Module):
    """DEG feeding two independent DEC heads."""

    def __init__(self, channels: int, num_classes: int, deg_dilations=(1, 2, 3), dec_dilations=(1, 2, 3),
                 dec_groups: int = 1, dropout: float = 0.1, omega_init: float = 1.0):
        super().__init__()
        self.deg = DEG(channels, deg_dilations, dropout, omega_init)
        self.heads = nn.ModuleList(
            DEC(channels, num_classes, dec_dilations, dec_groups, dropout) for _ in range(2)
        )

    def forward(self, f, generator: Optional[torch.Generator] = None):
        g1, g2 = self.deg(f, generator)
        return self.heads[0](g1, generator), self.heads[1](g2, generator)


def deg_forward(deg: DEG, f, generator=None):
    return deg(f, generator)


def dec_forward(dec: DEC, f, generator=None) -> BranchOutput:
    return dec(f, generator)


def pee_forward(deg: DEG, dec1: DEC, dec2: DEC, f, generator=None):
    g1, g2 = deg(f, generator)
    return dec1(g1, generator), dec2(g2, generator)
