import pytest
import torch

from a2mim.backbones import BackboneConfig, build_backbone, default_injection
from a2mim.errors import ConfigError, GeometryError
from a2mim.masking import generate_random_mask


def vit(injection=None, **kw):
    cfg = BackboneConfig(family="transformer", injection_point=injection, **kw)
    return build_backbone(cfg, seed=0).eval()


def cnn(injection=3, **kw):
    return build_backbone(BackboneConfig(family="cnn", injection_point=injection, **kw), seed=0).eval()


def test_token_count_and_param_budget():
    m = vit()
    assert m.num_tokens == 64
    assert 1.5e6 < m.num_parameters() < 3.0e6


def test_cnn_stage3_side():
    m = cnn()
    # stem 32->16, stage1 16, stage2 8, stage3 4, stage4 2
    assert [m.stage_side(s) for s in (1, 2, 3, 4)] == [16, 8, 4, 2]
    assert m.injection_hw == (4, 4)
    feats = m.forward_features(torch.rand(1, 3, 32, 32), return_taps=True)
    sides = {label: t.shape[-1] for label, t in feats.taps}
    assert sides["stem"] == 16 and sides["stage3.block1"] == 4 and feats.values.shape[-1] == 2


def test_default_injection_points():
    assert default_injection(BackboneConfig(family="cnn")) == 3
    assert default_injection(BackboneConfig(family="transformer", depth=6)) == 5
    assert default_injection(BackboneConfig(family="transformer", depth=12)) == 9


@pytest.mark.parametrize("family", ["transformer", "cnn"])
def test_same_seed_identical_params(family):
    a = build_backbone(BackboneConfig(family=family), seed=4)
    b = build_backbone(BackboneConfig(family=family), seed=4)
    c = build_backbone(BackboneConfig(family=family), seed=5)
    for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert na == nb and torch.equal(pa, pb)
    assert not torch.equal(a.mask_token.values, c.mask_token.values)


def test_build_does_not_touch_global_rng():
    torch.manual_seed(0)
    before = torch.rand(1)
    torch.manual_seed(0)
    build_backbone(BackboneConfig(), seed=99)
    assert torch.equal(torch.rand(1), before)


def test_bad_injection_points():
    with pytest.raises(ConfigError):
        build_backbone(BackboneConfig(family="transformer", depth=6, injection_point=7))
    with pytest.raises(ConfigError):
        build_backbone(BackboneConfig(family="cnn", injection_point=0))
    with pytest.raises(ConfigError):
        build_backbone(BackboneConfig(family="mlp"))


def test_mask_token_width_matches_injection():
    assert vit(injection=2).mask_token.width == 192
    assert cnn(injection=1).mask_token.width == 32
    assert cnn(injection=4).mask_token.width == 256


@pytest.mark.parametrize("family,points", [("transformer", range(7)), ("cnn", range(1, 5))])
def test_zero_token_neutral(family, points):
    x = torch.randn(2, 3, 32, 32)
    for p in points:
        m = build_backbone(BackboneConfig(family=family, injection_point=p), seed=1).eval()
        fm = torch.ones(2, *m.injection_hw, dtype=torch.bool)
        ref = m.forward_features(x).values
        out = m.forward_features(x, fm, token=torch.zeros(m.mask_token.width)).values
        assert (out - ref).abs().max() <= 1e-6


@pytest.mark.parametrize("family", ["transformer", "cnn"])
def test_all_false_mask_exact(family):
    m = build_backbone(BackboneConfig(family=family), seed=1).eval()
    x = torch.randn(2, 3, 32, 32)
    fm = torch.zeros(2, *m.injection_hw, dtype=torch.bool)
    assert torch.equal(m.forward_features(x, fm).values, m.forward_features(x).values)


def test_injection_depth_changes_output():
    x = torch.randn(2, 3, 32, 32)
    tok = torch.randn(192)
    fm = generate_random_mask((8, 8), 0.6, 0, batch_size=2).grid
    early = vit(injection=0).forward_features(x, fm, token=tok).values
    late = vit(injection=5).forward_features(x, fm, token=tok).values
    assert not torch.allclose(early, late)


@pytest.mark.parametrize("family,point", [("transformer", 3), ("cnn", 2)])
def test_injection_locality(family, point):
    m = build_backbone(BackboneConfig(family=family, injection_point=point), seed=2).eval()
    x = torch.randn(2, 3, 32, 32)
    fm = torch.ones(2, *m.injection_hw, dtype=torch.bool)
    plain = m.forward_features(x, return_taps=True).taps
    masked = m.forward_features(x, fm, token=torch.ones(m.mask_token.width), return_taps=True).taps
    labels = [lab for lab, _ in plain]
    first_changed = next(i for i, ((_, a), (_, b)) in enumerate(zip(plain, masked)) if not torch.equal(a, b))
    if family == "transformer":
        assert labels[first_changed] == f"layer{point}"
    else:
        assert labels[first_changed] == f"stage{point}.block1"


def test_feature_mask_resolution_mismatch():
    m = vit()
    with pytest.raises(GeometryError):
        m.forward_features(torch.rand(1, 3, 32, 32), torch.ones(1, 4, 4, dtype=torch.bool))
    with pytest.raises(GeometryError):
        m.forward_features(torch.rand(1, 3, 16, 16))


def test_cnn_feature_mask_for_coarser_stage():
    m = cnn(injection=3)
    grid = generate_random_mask((8, 8), 0.6, 0, batch_size=2, patch_size=4)
    fm = m.feature_mask_for(grid)
    assert fm.shape == (2, 4, 4)


@pytest.mark.parametrize("family", ["transformer", "cnn"])
@pytest.mark.parametrize("size", [32, 64])
def test_decoder_shape_and_affinity(family, size):
    m = build_backbone(BackboneConfig(family=family, image_size=size), seed=0).eval()
    final = m.forward_features(torch.randn(2, 3, size, size)).values
    out = m.decode_to_image(final)
    assert out.shape == (2, 3, size, size)
    bias_img = m.decode_to_image(torch.zeros_like(final))
    # decoder bias rearranged by the pixel shuffle
    side = size // m.stride
    expected = torch.nn.functional.pixel_shuffle(m.decoder.bias.view(1, -1, 1, 1).expand(2, -1, side, side), m.stride)
    assert torch.allclose(bias_img, expected)
    doubled = m.decode_to_image(2 * final)
    assert torch.allclose(doubled - bias_img, 2 * (out - bias_img), atol=1e-5)


@pytest.mark.parametrize("family", ["transformer", "cnn"])
def test_classify_head(family):
    m = build_backbone(BackboneConfig(family=family, num_classes=10), seed=0).eval()
    x = torch.randn(1, 3, 32, 32).repeat(2, 1, 1, 1)
    logits = m.classify(x)
    assert logits.shape == (2, 10) and torch.isfinite(logits).all()
    assert torch.equal(logits[0], logits[1])


def test_classify_without_head():
    with pytest.raises(ConfigError):
        vit().classify(torch.rand(1, 3, 32, 32))


def test_random_init_near_chance():
    m = build_backbone(BackboneConfig(family="transformer", num_classes=10), seed=3).eval()
    g = torch.Generator().manual_seed(0)
    # balanced set: 20 images per class, labels independent of the images
    x = torch.randn(200, 3, 32, 32, generator=g)
    y = torch.arange(10).repeat_interleave(20)
    with torch.no_grad():
        acc = float((m.classify(x).argmax(1) == y).float().mean())
    assert abs(acc - 0.1) <= 0.05


@pytest.mark.parametrize("family", ["transformer", "cnn"])
def test_token_receives_gradient(family):
    from a2mim.masking import fill_with_mean, upsample_mask_to_pixels
    from a2mim.spectral import total_loss

    patch = 4 if family == "transformer" else 8
    m = build_backbone(BackboneConfig(family=family), seed=0).train()
    x = torch.randn(4, 3, 32, 32)
    pm = generate_random_mask((32 // patch, 32 // patch), 0.6, 0, batch_size=4, patch_size=patch)
    px = upsample_mask_to_pixels(pm)
    pred = m.decode_to_image(m.forward_features(fill_with_mean(x, px), m.feature_mask_for(pm)))
    total_loss(pred, x, px).total.backward()
    assert m.mask_token.values.grad.norm() > 0


def test_stable_parameter_names():
    names = list(vit().state_dict().keys())
    assert "blocks.0.attn.qkv.weight" in names and "mask_token.values" in names and "decoder.weight" in names
    names = list(cnn().state_dict().keys())
    assert "stages.2.1.conv2.weight" in names and "stem.0.weight" in names
