"""Global extension embedding: spatial mean pooling, then a DEC head on a 1x1 map."""

from __future__ import annotations

import torch.nn as nn

from mean_cvgl.layers import GlobalMeanPool
from mean_cvgl.pee import DEC, BranchOutput


def global_mean_pool(f):
    """(B, C, H, W) -> (B, C), averaging every spatial position."""
    return GlobalMeanPool()(f)


class GEE(nn.Module):
    def __init__(self, channels: int, num_classes: int, dec_dilations=(1, 2, 3),
                 dec_groups: int = 1, dropout: float = 0.1):
        super().__init__()
        self.pool = GlobalMeanPool()
        # separate weights from the PEE heads
        self.head = DEC(channels, num_classes, dec_dilations, dec_groups, dropout)

    def forward(self, f, generator=None) -> BranchOutput:
        g = self.pool(f)
        # the 3x3 dilated kernels only see their centre tap on a zero-padded 1x1 map
        return self.head(g[:, :, None, None], generator)


def gee_forward(dec: DEC, f, generator=None) -> BranchOutput:
    return dec(global_mean_pool(f)[:, :, None, None], generator)
