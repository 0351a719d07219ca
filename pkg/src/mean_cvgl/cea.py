"""Cross-domain enhanced alignment branch.

Pipeline over a flattened map ``(B, C, L)``:

    up       ReLU(BN(1x1 conv C -> 2C))
    down     L2norm_channels(Dropout(1x1 conv 2C -> C')))
    calibrate  1x1 conv C' -> C', softmax over L of x/T, then softmax over C'
    fuse     ReLU(BN(1x1 conv over cat(1x1(f2d), 1x1(calibrated)))) -> (C + C')/2

All convolutions are pointwise, so they are expressed as ``Conv1d`` with
kernel size 1 acting on the flattened length axis.
"""

from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn as nn

from mean_cvgl.config import ConfigError
from mean_cvgl.layers import ChannelL2Norm, Dropout, flatten_spatial


class Softmax(nn.Module):
    """Max-shifted softmax along ``dim`` (stable for large-magnitude inputs)."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def forward(self, x):
        return torch.softmax(x, dim=self.dim)


class Calibration(nn.Module):
    """Temperature softmax over positions followed by a softmax over channels."""

    def __init__(self, channels: int, temperature: float = 1.0, learnable: bool = False):
        super().__init__()
        if not temperature > 0:
            raise ConfigError("calibration temperature must be positive")
        self.proj = nn.Conv1d(channels, channels, 1)
        log_t = torch.tensor(math.log(temperature))
        if learnable:
            self.log_temperature = nn.Parameter(log_t)
        else:
            self.register_buffer("log_temperature", log_t)
        self.spatial_softmax = Softmax(dim=2)
        self.channel_softmax = Softmax(dim=1)

    @property
    def temperature(self):
        return self.log_temperature.exp()

    def forward(self, f_l):
        x = self.proj(f_l)
        return self.channel_softmax(self.spatial_softmax(x / self.temperature))


class CEA(nn.Module):
    def __init__(self, channels: int, low_channels: Optional[int] = None, temperature: float = 1.0,
                 learnable_temperature: bool = False, dropout: float = 0.1):
        super().__init__()
        c = channels
        cp = low_channels if low_channels is not None else c // 2
        if (c + cp) % 2:
            raise ConfigError(f"C + C' must be even (C={c}, C'={cp})")
        mid = (c + cp) // 2
        self.channels, self.low_channels, self.out_channels = c, cp, mid
        # up projection
        self.up = nn.Conv1d(c, 2 * c, 1)
        self.up_bn = nn.BatchNorm1d(2 * c)
        self.up_act = nn.ReLU()
        # down projection
        self.down = nn.Conv1d(2 * c, cp, 1)
        self.down_drop = Dropout(dropout)
        self.down_norm = ChannelL2Norm()
        self.calibration = Calibration(cp, temperature, learnable_temperature)
        # multi-level fusion
        self.fuse_src = nn.Conv1d(c, mid, 1)
        self.fuse_cal = nn.Conv1d(cp, mid, 1)
        self.fuse_out = nn.Conv1d(c + cp, mid, 1)
        self.fuse_bn = nn.BatchNorm1d(mid)
        self.fuse_act = nn.ReLU()

    def project_up(self, f2d):
        return self.up_act(self.up_bn(self.up(f2d)))

    def project_down(self, f_h, generator=None):
        return self.down_norm(self.down_drop(self.down(f_h), generator))

    def calibrate(self, f_l):
        return self.calibration(f_l)

    def fuse(self, f2d, f_w):
        if f2d.shape[0] != f_w.shape[0] or f2d.shape[2] != f_w.shape[2]:
            raise ValueError(
                f"fuse needs matching batch and length, got {tuple(f2d.shape)} and {tuple(f_w.shape)}"
            )
        f_c = torch.cat([self.fuse_src(f2d), self.fuse_cal(f_w)], dim=1)
        return self.fuse_act(self.fuse_bn(self.fuse_out(f_c)))

    def forward(self, f, generator: Optional[torch.Generator] = None):
        f2d = flatten_spatial(f) if f.dim() == 4 else f
        f_h = self.project_up(f2d)
        f_l = self.project_down(f_h, generator)
        f_w = self.calibrate(f_l)
        return self.fuse(f2d, f_w)


def cea_forward(cea: CEA, f, generator=None):
    return cea(f, generator)
