import pytest
import torch.nn as nn

from mean_cvgl.config import preset
from mean_cvgl.model import build_model
from mean_cvgl.profiler import (
    UnsupportedLayerError,
    count_parameters,
    estimate_flops,
    group_by_prefix,
)


def test_conv_parameters_and_flops():
    conv = nn.Conv2d(4, 8, 3, padding=1)
    assert count_parameters(conv) == 296
    assert estimate_flops(conv, (1, 4, 16, 16)).gflops * 1e9 == pytest.approx(147_456)


def test_linear_parameters_and_flops():
    fc = nn.Linear(768, 701)
    assert count_parameters(fc) == 539_069
    assert estimate_flops(fc, (1, 768)).gflops * 1e9 == pytest.approx(2 * 768 * 701)


def test_grouped_conv_flops():
    conv = nn.Conv2d(8, 8, 3, padding=1, groups=4, bias=False)
    assert estimate_flops(conv, (1, 8, 4, 4)).gflops * 1e9 == pytest.approx(2 * 2 * 9 * 8 * 16)


def test_pool_counts_input_elements():
    assert estimate_flops(nn.AdaptiveAvgPool2d(1), (2, 3, 4, 4)).gflops * 1e9 == pytest.approx(96)


def test_unsupported_layer():
    with pytest.raises(UnsupportedLayerError, match="PReLU"):
        estimate_flops(nn.Sequential(nn.Conv2d(3, 4, 1), nn.PReLU()), (1, 3, 4, 4))


def test_conv_stack_scales_with_area():
    net = nn.Sequential(nn.Conv2d(3, 8, 3, padding=1), nn.ReLU(), nn.Conv2d(8, 8, 3, padding=1))
    small = estimate_flops(net, (1, 3, 16, 16)).gflops
    large = estimate_flops(net, (1, 3, 32, 32)).gflops
    assert large == pytest.approx(4 * small)


def test_trainable_only():
    net = nn.Sequential(nn.Linear(4, 4), nn.Linear(4, 2))
    net[0].weight.requires_grad_(False)
    assert count_parameters(net, trainable_only=True) == 4 + 10


def test_profile_restores_training_mode():
    net = nn.Sequential(nn.Conv2d(3, 4, 1), nn.BatchNorm2d(4))
    net.train()
    estimate_flops(net, (1, 3, 4, 4))
    assert net.training


def test_group_by_prefix():
    assert group_by_prefix({"a.x": 1, "a.y": 2, "b": 4}) == {"a": 3, "b": 4}


@pytest.mark.slow
def test_full_configuration_against_reported_cost():
    cfg = preset("full")
    report = estimate_flops(build_model(cfg.model), (1, 3, 384, 384))
    assert report.params_m == pytest.approx(36.50, rel=0.10)
    assert report.gflops == pytest.approx(26.18, rel=0.10)
