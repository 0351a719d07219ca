"""Small building blocks shared across branches.

Dropout here draws its mask from an explicitly passed ``torch.Generator`` so
training runs never depend on the global RNG.
"""

from __future__ import annotations

from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F


class LayerNorm2d(nn.Module):
    """LayerNorm over the channel axis of an NCHW map (ConvNeXt channels-first norm)."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mean = x.mean(1, keepdim=True)
        var = (x - mean).pow(2).mean(1, keepdim=True)
        x = (x - mean) / torch.sqrt(var + self.eps)
        return self.weight[:, None, None] * x + self.bias[:, None, None]


class Dropout(nn.Module):
    """Inverted dropout with an optional caller-supplied generator."""

    def __init__(self, p: float = 0.1):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError("dropout probability must lie in [0, 1)")
        self.p = p

    def forward(self, x, generator: Optional[torch.Generator] = None):
        if not self.training or self.p == 0.0:
            return x
        keep = 1.0 - self.p
        noise = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device)
        return x * (noise < keep).to(x.dtype) / keep

    def extra_repr(self):
        return f"p={self.p}"


class ChannelL2Norm(nn.Module):
    """Unit L2 norm along dim 1 at every position; eps guards all-zero columns."""

    def __init__(self, eps: float = 1e-12):
        super().__init__()
        self.eps = eps

    def forward(self, x):
        return F.normalize(x, p=2.0, dim=1, eps=self.eps)


class GlobalMeanPool(nn.Module):
    """Mean over all spatial positions: (B, C, H, W) -> (B, C)."""

    def forward(self, x):
        if x.dim() != 4:
            raise ValueError(f"expected a rank-4 feature map, got shape {tuple(x.shape)}")
        return x.mean(dim=(2, 3))


def flatten_spatial(f):
    """(B, C, H, W) -> (B, C, H*W), row-major over (h, w)."""
    b, c, h, w = f.shape
    return f.reshape(b, c, h * w)


def unflatten_spatial(f2d, height: int, width: int):
    b, c, length = f2d.shape
    if length != height * width:
        raise ValueError(f"cannot unflatten length {length} into {height}x{width}")
    return f2d.reshape(b, c, height, width)
