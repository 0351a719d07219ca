"""Parameter counting and analytic FLOP estimation.

FLOP convention:

* convolution / linear: 2 FLOPs per multiply-accumulate, bias adds not counted
* normalization (LayerNorm, BatchNorm, L2 norm, softmax) and activation
  (ReLU, GELU): 1 FLOP per output element
* pooling: 1 FLOP per input element
* dropout and identity: 0 (evaluation mode)
* residual adds, scalar scaling, reshapes: not counted

The estimate is taken from one forward pass in eval mode with hooks on every
leaf module. A leaf module of an unknown type raises
:class:`UnsupportedLayerError` instead of silently contributing zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from mean_cvgl.cea import Softmax
from mean_cvgl.layers import ChannelL2Norm, Dropout, GlobalMeanPool, LayerNorm2d


class UnsupportedLayerError(TypeError):
    def __init__(self, layers):
        self.layers = sorted(set(layers))
        super().__init__("no FLOP rule for layer(s): " + ", ".join(self.layers))


@dataclass
class CostReport:
    parameter_count: int
    gflops: float
    input_shape: tuple
    per_module: dict = field(default_factory=dict)

    @property
    def params_m(self) -> float:
        return self.parameter_count / 1e6


def count_parameters(model: nn.Module, trainable_only: bool = False) -> int:
    """Total number of parameter elements (optionally only those requiring grad)."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)


def _conv_flops(m: nn.modules.conv._ConvNd, inp, out) -> int:
    kernel = 1
    for k in m.kernel_size:
        kernel *= k
    macs_per_out = (m.in_channels // m.groups) * kernel
    return 2 * macs_per_out * out.numel()


def _linear_flops(m: nn.Linear, inp, out) -> int:
    return 2 * m.in_features * out.numel()


def _per_out_element(m, inp, out) -> int:
    return out.numel()


def _per_in_element(m, inp, out) -> int:
    return inp[0].numel()


def _zero(m, inp, out) -> int:
    return 0


FLOP_RULES = {
    nn.Conv1d: _conv_flops,
    nn.Conv2d: _conv_flops,
    nn.Linear: _linear_flops,
    nn.LayerNorm: _per_out_element,
    LayerNorm2d: _per_out_element,
    nn.BatchNorm1d: _per_out_element,
    nn.BatchNorm2d: _per_out_element,
    ChannelL2Norm: _per_out_element,
    Softmax: _per_out_element,
    nn.ReLU: _per_out_element,
    nn.GELU: _per_out_element,
    nn.AdaptiveAvgPool2d: _per_in_element,
    GlobalMeanPool: _per_in_element,
    Dropout: _zero,
    nn.Dropout: _zero,
    nn.Identity: _zero,
}


def _rule_for(m):
    for cls in type(m).__mro__:
        if cls in FLOP_RULES:
            return FLOP_RULES[cls]
    return None


def estimate_flops(model: nn.Module, input_shape=(1, 3, 384, 384), dtype=torch.float32) -> CostReport:
    """Forward a zero tensor of ``input_shape`` and sum per-layer FLOPs."""
    leaves = [(name, m) for name, m in model.named_modules() if not any(True for _ in m.children())]
    unsupported = [f"{name or '<root>'} ({type(m).__name__})" for name, m in leaves if _rule_for(m) is None]
    if unsupported:
        raise UnsupportedLayerError(unsupported)

    per_module: dict = {}
    handles = []

    def make_hook(name, rule):
        def hook(m, inp, out):
            per_module[name] = per_module.get(name, 0) + rule(m, inp, out)
        return hook

    for name, m in leaves:
        handles.append(m.register_forward_hook(make_hook(name, _rule_for(m))))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(torch.zeros(input_shape, dtype=dtype))
    finally:
        for h in handles:
            h.remove()
        model.train(was_training)
    total = sum(per_module.values())
    return CostReport(count_parameters(model), total / 1e9, tuple(input_shape), per_module)


def profile(model: nn.Module, input_shape=(1, 3, 384, 384)) -> CostReport:
    return estimate_flops(model, input_shape)


def group_by_prefix(per_module: dict, depth: int = 1) -> dict:
    """Sum a per-module FLOP table by the first ``depth`` name components."""
    out: dict = {}
    for name, v in per_module.items():
        key = ".".join(name.split(".")[:depth])
        out[key] = out.get(key, 0) + v
    return out
