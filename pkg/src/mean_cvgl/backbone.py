"""Shared-weight feature extractors.

Two networks sit behind one interface: a from-scratch ConvNeXt-Tiny used for
cost budgeting, and a three-stage toy CNN small enough to train on a CPU in
seconds. Both map ``(B, 3, R, R)`` pixels to a ``(B, C, R/s, R/s)`` map.
"""

from __future__ import annotations

import enum
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Union

import numpy as np
import torch
import torch.nn as nn

from mean_cvgl.config import BackboneSpec, ConfigError
from mean_cvgl.layers import LayerNorm2d

WEIGHT_FORMAT_VERSION = 1


class View(str, enum.Enum):
    DRONE = "drone"
    SATELLITE = "satellite"


@dataclass
class ImageBatch:
    pixels: torch.Tensor
    view: View
    labels: torch.Tensor

    def __post_init__(self):
        self.view = View(self.view)
        if self.pixels.dim() != 4 or self.pixels.shape[1] != 3:
            raise ValueError(f"pixels must be (B, 3, H, W), got {tuple(self.pixels.shape)}")
        if self.pixels.shape[0] < 1:
            raise ValueError("an image batch needs at least one image")
        if self.pixels.shape[2] != self.pixels.shape[3]:
            raise ValueError("only square images are supported")
        if len(self.labels) != self.pixels.shape[0]:
            raise ValueError("one label per image is required")

    def __len__(self):
        return self.pixels.shape[0]


class ConvNeXtBlock(nn.Module):
    """dwconv7x7 -> LN -> 4x pointwise MLP with GELU -> layer scale -> residual."""

    def __init__(self, dim: int, layer_scale_init: float = 1e-6):
        super().__init__()
        self.dwconv = nn.Conv2d(dim, dim, kernel_size=7, padding=3, groups=dim)
        self.norm = nn.LayerNorm(dim, eps=1e-6)
        self.pwconv1 = nn.Linear(dim, 4 * dim)
        self.act = nn.GELU()
        self.pwconv2 = nn.Linear(4 * dim, dim)
        self.gamma = nn.Parameter(layer_scale_init * torch.ones(dim))

    def forward(self, x):
        shortcut = x
        x = self.dwconv(x).permute(0, 2, 3, 1)
        x = self.pwconv2(self.act(self.pwconv1(self.norm(x))))
        x = (self.gamma * x).permute(0, 3, 1, 2)
        return shortcut + x


class ConvNeXtTiny(nn.Module):
    # Norm placement follows the ConvNeXt reference: channels-first LN after the
    # stem and before each downsampling conv, channels-last LN inside blocks,
    # and one final LN on the last stage's map (the slot a classifier head's
    # pre-norm would occupy; we keep the spatial map instead of pooling).
    def __init__(self, depths=(3, 3, 9, 3), widths=(96, 192, 384, 768)):
        super().__init__()
        self.downsample = nn.ModuleList()
        self.downsample.append(
            nn.Sequential(nn.Conv2d(3, widths[0], kernel_size=4, stride=4), LayerNorm2d(widths[0]))
        )
        for i in range(3):
            self.downsample.append(
                nn.Sequential(
                    LayerNorm2d(widths[i]),
                    nn.Conv2d(widths[i], widths[i + 1], kernel_size=2, stride=2),
                )
            )
        self.stages = nn.ModuleList(
            nn.Sequential(*[ConvNeXtBlock(widths[i]) for _ in range(depths[i])]) for i in range(4)
        )
        self.norm = LayerNorm2d(widths[-1])
        self.apply(_trunc_normal_init)

    def forward(self, x):
        for down, stage in zip(self.downsample, self.stages):
            x = stage(down(x))
        return self.norm(x)


class ToyBackbone(nn.Module):
    """Each stage: stride-2 3x3 conv, channel LayerNorm, GELU, then (depth-1) residual 3x3 blocks."""

    def __init__(self, depths=(1, 1, 1), widths=(16, 32, 64)):
        super().__init__()
        layers = []
        c_in = 3
        for depth, width in zip(depths, widths):
            layers += [nn.Conv2d(c_in, width, 3, stride=2, padding=1), LayerNorm2d(width), nn.GELU()]
            for _ in range(depth - 1):
                layers.append(_ToyResidual(width))
            c_in = width
        self.body = nn.Sequential(*layers)
        self.apply(_trunc_normal_init)

    def forward(self, x):
        return self.body(x)


class _ToyResidual(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.conv = nn.Conv2d(width, width, 3, padding=1)
        self.norm = LayerNorm2d(width)
        self.act = nn.GELU()

    def forward(self, x):
        return x + self.act(self.norm(self.conv(x)))


def _trunc_normal_init(m):
    if isinstance(m, (nn.Conv2d, nn.Linear)):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)


class Backbone(nn.Module):
    """Wraps a feature network together with the BackboneSpec it was built from."""

    def __init__(self, spec: BackboneSpec, net: nn.Module, seed: int):
        super().__init__()
        self.spec = spec
        self.seed = seed
        self.net = net

    @property
    def out_channels(self) -> int:
        return self.spec.out_channels

    @property
    def stride(self) -> int:
        return self.spec.stride

    def forward(self, x):
        if isinstance(x, ImageBatch):
            x = x.pixels
        res = self.spec.input_resolution
        if x.dim() != 4 or x.shape[1] != 3 or x.shape[2] != res or x.shape[3] != res:
            raise ValueError(
                f"backbone expects (B, 3, {res}, {res}) input, got {tuple(x.shape)}"
            )
        return self.net(x)


def build_backbone(spec: BackboneSpec, seed: int = 0) -> Backbone:
    """Build a backbone with seed-deterministic initialization."""
    spec.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if spec.kind == "convnext_tiny":
            net = ConvNeXtTiny(spec.stage_depths, spec.stage_widths)
        elif spec.kind == "toy":
            net = ToyBackbone(spec.stage_depths, spec.stage_widths)
        else:  # pragma: no cover - validate() already rejects
            raise ConfigError(f"unknown backbone kind {spec.kind!r}")
    backbone = Backbone(spec, net, seed)
    if spec.weights:
        # accepts a standalone backbone archive or a whole-model one
        keys = load_archive(spec.weights)[0].keys()
        load_weights(backbone, spec.weights, "backbone." if any(k.startswith("backbone.") for k in keys) else "")
    if spec.freeze:
        for p in backbone.parameters():
            p.requires_grad_(False)
    return backbone


def extract_features(backbone: Backbone, x: Union[ImageBatch, torch.Tensor]) -> torch.Tensor:
    """Run the shared extractor; the view tag never changes which weights are used."""
    return backbone(x)


# -- weight archive ---------------------------------------------------------


def save_archive(path, state: dict, manifest: dict | None = None) -> None:
    """Write a key -> array mapping to ``.npz`` with a versioned JSON manifest."""
    arrays = {k: v.detach().cpu().numpy() if torch.is_tensor(v) else np.asarray(v) for k, v in state.items()}
    record = {"format_version": WEIGHT_FORMAT_VERSION, "created": time.strftime("%Y-%m-%dT%H:%M:%S")}
    record.update(manifest or {})
    arrays["__manifest__"] = np.frombuffer(json.dumps(record).encode(), dtype=np.uint8)
    with open(Path(path), "wb") as fh:
        np.savez(fh, **arrays)


def load_archive(path) -> tuple:
    """Return ``(state, manifest)`` from an archive written by :func:`save_archive`."""
    with np.load(path) as data:
        manifest = json.loads(data["__manifest__"].tobytes().decode())
        if manifest.get("format_version") != WEIGHT_FORMAT_VERSION:
            raise ValueError(f"unsupported weight archive version {manifest.get('format_version')}")
        state = {k: torch.from_numpy(np.array(data[k])) for k in data.files if k != "__manifest__"}
    return state, manifest


def read_manifest(path) -> dict:
    return load_archive(path)[1]


def save_weights(module: nn.Module, path, manifest: dict | None = None) -> None:
    record = {}
    if isinstance(module, Backbone):
        record = {"spec": asdict(module.spec), "seed": module.seed}
    record.update(manifest or {})
    save_archive(path, module.state_dict(), record)


def load_weights(module: nn.Module, path, prefix: str = "") -> dict:
    """Load module weights; ``prefix`` selects a namespaced subset such as ``"backbone."``."""
    state, manifest = load_archive(path)
    state = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
    missing, unexpected = module.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise ValueError(f"weight archive mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
    return manifest
