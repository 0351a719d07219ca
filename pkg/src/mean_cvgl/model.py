"""The assembled network: shared backbone plus PEE, GEE and CEA branches."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from mean_cvgl.backbone import ImageBatch, build_backbone
from mean_cvgl.cea import CEA
from mean_cvgl.config import ModelConfig
from mean_cvgl.gee import GEE
from mean_cvgl.pee import PEE, BranchOutput


@dataclass
class ModelOutput:
    features: torch.Tensor
    pee: Tuple[BranchOutput, BranchOutput]
    gee: BranchOutput
    cea: torch.Tensor  # (B, (C + C')/2, L)


def split_output(out: ModelOutput, n: int) -> Tuple[ModelOutput, ModelOutput]:
    """Split a joint forward pass over ``cat([first, second])`` at row ``n``."""
    def cut(sl):
        return ModelOutput(
            features=out.features[sl],
            pee=tuple(BranchOutput(h.embedding[sl], h.logits[sl]) for h in out.pee),
            gee=BranchOutput(out.gee.embedding[sl], out.gee.logits[sl]),
            cea=out.cea[sl],
        )
    return cut(slice(0, n)), cut(slice(n, None))


class MEAN(nn.Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        self.backbone = build_backbone(config.backbone, seed)
        c = config.channels
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed + 1)
            self.pee = PEE(c, config.num_classes, config.deg_dilations, config.dec_dilations,
                           config.dec_groups, config.dropout, config.omega_init)
            self.gee = GEE(c, config.num_classes, config.dec_dilations, config.dec_groups, config.dropout)
            self.cea = CEA(c, config.resolved_cea_channels, config.cea_temperature,
                           config.learnable_cea_temperature, config.dropout)

    def forward(self, x, generator: Optional[torch.Generator] = None) -> ModelOutput:
        if isinstance(x, ImageBatch):
            x = x.pixels
        f = self.backbone(x)
        return ModelOutput(
            features=f,
            pee=self.pee(f, generator),
            gee=self.gee(f, generator),
            cea=self.cea(f, generator),
        )

    @property
    def descriptor_dim(self) -> int:
        d = sum(h.embed_dim for h in self.pee.heads) + self.gee.head.embed_dim
        if self.config.cea_in_descriptor:
            d += self.cea.out_channels
        return d

    def descriptor(self, out: ModelOutput) -> torch.Tensor:
        """Inference descriptor: normalized PEE and GEE embeddings, concatenated and renormalized."""
        parts = [out.pee[0].embedding, out.pee[1].embedding, out.gee.embedding]
        if self.config.cea_in_descriptor:
            parts.append(out.cea.mean(dim=2))
        cat = torch.cat([F.normalize(p, dim=1) for p in parts], dim=1)
        return F.normalize(cat, dim=1)

    @torch.no_grad()
    def embed(self, pixels: torch.Tensor, batch_size: int = 64) -> torch.Tensor:
        was_training = self.training
        self.eval()
        try:
            chunks = [self.descriptor(self(pixels[i:i + batch_size]))
                      for i in range(0, len(pixels), batch_size)]
        finally:
            self.train(was_training)
        return torch.cat(chunks)


def build_model(config: ModelConfig, seed: int = 0, dtype=torch.float32) -> MEAN:
    return MEAN(config, seed).to(dtype)
