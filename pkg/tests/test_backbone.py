import pytest
import torch

from mean_cvgl.backbone import (
    ImageBatch,
    View,
    build_backbone,
    extract_features,
    load_weights,
    read_manifest,
    save_weights,
)
from mean_cvgl.config import BackboneSpec, ConfigError
from mean_cvgl.profiler import count_parameters

TOY = BackboneSpec("toy", (1, 1, 1), (16, 32, 64), 64)


def flat_params(m):
    return torch.cat([p.detach().reshape(-1) for p in m.parameters()])


def test_convnext_tiny_output_shape_and_stride():
    bb = build_backbone(BackboneSpec.convnext_tiny(384), seed=0).eval()
    with torch.no_grad():
        out = extract_features(bb, torch.rand(2, 3, 384, 384))
    assert out.shape == (2, 768, 384 // 32, 384 // 32)
    assert torch.isfinite(out).all()


def test_convnext_tiny_parameter_count_is_seed_invariant():
    a = count_parameters(build_backbone(BackboneSpec.convnext_tiny(), seed=0))
    b = count_parameters(build_backbone(BackboneSpec.convnext_tiny(), seed=5))
    assert a == b
    # ConvNeXt-Tiny without its classifier: 27.82 M
    assert a == pytest.approx(27.82e6, rel=1e-3)


def test_toy_output_shape():
    bb = build_backbone(TOY, seed=0)
    assert extract_features(bb, torch.rand(2, 3, 64, 64)).shape == (2, 64, 8, 8)


def test_same_seed_same_weights():
    assert torch.equal(flat_params(build_backbone(TOY, 3)), flat_params(build_backbone(TOY, 3)))
    assert not torch.equal(flat_params(build_backbone(TOY, 3)), flat_params(build_backbone(TOY, 4)))


def test_build_does_not_touch_global_rng():
    torch.manual_seed(11)
    expected = torch.rand(3)
    torch.manual_seed(11)
    build_backbone(TOY, 0)
    assert torch.equal(torch.rand(3), expected)


def test_shared_weights_across_views():
    bb = build_backbone(TOY, 0)
    px = torch.rand(3, 3, 64, 64)
    labels = torch.arange(3)
    d = extract_features(bb, ImageBatch(px, View.DRONE, labels))
    s = extract_features(bb, ImageBatch(px.clone(), View.SATELLITE, labels))
    assert torch.equal(d, s)


def test_zero_input_is_finite():
    bb = build_backbone(TOY, 0)
    assert torch.isfinite(extract_features(bb, torch.zeros(2, 3, 64, 64))).all()


def test_fp64_determinism():
    bb = build_backbone(TOY, 2).double()
    x = torch.rand(2, 3, 64, 64, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    assert torch.equal(bb(x), build_backbone(TOY, 2).double()(x))


def test_resolution_mismatch():
    with pytest.raises(ValueError, match="expects"):
        build_backbone(TOY, 0)(torch.rand(1, 3, 32, 32))


def test_unknown_kind():
    with pytest.raises(ConfigError):
        build_backbone(BackboneSpec("resnet", (1,), (8,), 64))


def test_toy_needs_stride_eight():
    with pytest.raises(ConfigError):
        BackboneSpec("toy", (1, 1), (16, 32), 64).validate()


def test_convnext_widths_are_fixed():
    with pytest.raises(ConfigError):
        BackboneSpec("convnext_tiny", (3, 3, 9, 3), (64, 128, 256, 512), 384).validate()


def test_image_batch_rejects_non_square():
    with pytest.raises(ValueError):
        ImageBatch(torch.rand(1, 3, 32, 48), "drone", torch.tensor([0]))


def test_weight_archive_round_trip(tmp_path):
    a = build_backbone(TOY, 0)
    save_weights(a, tmp_path / "bb.npz")
    manifest = read_manifest(tmp_path / "bb.npz")
    assert manifest["format_version"] == 1 and manifest["seed"] == 0
    assert manifest["spec"]["kind"] == "toy" and "created" in manifest
    b = build_backbone(TOY, 9)
    load_weights(b, tmp_path / "bb.npz")
    assert torch.equal(flat_params(a), flat_params(b))
    spec = BackboneSpec("toy", (1, 1, 1), (16, 32, 64), 64, weights=str(tmp_path / "bb.npz"))
    assert torch.equal(flat_params(build_backbone(spec, 4)), flat_params(a))


def test_freeze_flag():
    spec = BackboneSpec("toy", (1, 1, 1), (16, 32, 64), 64, freeze=True)
    bb = build_backbone(spec)
    assert count_parameters(bb, trainable_only=True) == 0
    assert count_parameters(bb) > 0
