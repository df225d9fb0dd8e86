import math

import numpy as np
import pytest
import torch
from torch import nn

from oracles import enumerate_interaction, harsanyi_game, harsanyi_interaction

from a2mim.backbones import BackboneConfig, build_backbone
from a2mim.engine import evaluate_accuracy
from a2mim.errors import ConfigError, NumericError
from a2mim.masking import fill_with_mean
from a2mim.probes import (
    delta_log_amplitude,
    feature_variance,
    interaction_strength,
    interaction_strength_distribution,
    masked_model_output_f,
    multiorder_interaction,
    occlusion_curve,
    radial_amplitude,
    salient_patch_ranking,
    spectrum_and_variance_profile,
)


def vectorised(f_set):
    def f(kept):
        return np.array([f_set(frozenset(np.flatnonzero(row).tolist())) for row in np.atleast_2d(kept)])
    return f


def additive(weights):
    return vectorised(lambda s: sum(weights[k] for k in s))


def pairwise(i, j, w):
    return vectorised(lambda s: w * (i in s) * (j in s))


def tiny_vit(num_classes=10, seed=0):
    m = build_backbone(BackboneConfig(depth=2, width=32, heads=2, num_classes=num_classes), seed=seed)
    return m.eval()


def fixed_probability_model(p):
    m = tiny_vit(num_classes=2).double()
    with torch.no_grad():
        m.head.weight.zero_()
        m.head.bias.copy_(torch.tensor([math.log(p), math.log(1 - p)], dtype=torch.float64))
    return m


# ---- masked_model_output_f ------------------------------------------------

@pytest.mark.parametrize("p, expected", [(0.5, 0.0), (0.9, math.log(9.0))])
def test_output_score_closed_form(p, expected):
    m = fixed_probability_model(p)
    img = torch.randn(3, 32, 32, dtype=torch.float64)
    got = masked_model_output_f(m, img, 0, np.ones(64, bool))
    assert got == pytest.approx(expected, abs=1e-9)


def test_output_score_clamps_saturated_probability():
    m = fixed_probability_model(0.5)
    with torch.no_grad():
        m.head.bias.copy_(torch.tensor([80.0, -80.0]))
    got = masked_model_output_f(m, torch.randn(3, 32, 32, dtype=torch.float64), 0, np.ones(64, bool))
    assert got == pytest.approx(math.log((1 - 1e-6) / 1e-6))


def test_full_set_matches_clean_score():
    m = tiny_vit()
    img = torch.randn(3, 32, 32)
    with torch.no_grad():
        p = torch.softmax(m.classify(img[None]).double(), -1)[0, 4]
    expected = float(torch.log(p / (1 - p)))
    assert masked_model_output_f(m, img, 4, np.ones(64, bool)) == pytest.approx(expected, abs=1e-6)


def test_dropped_patches_take_baseline():
    m = tiny_vit()
    img = torch.randn(3, 32, 32)
    kept = np.zeros(64, bool)
    kept[:8] = True  # first row of the 8x8 grid
    composed = img.clone()
    composed[:, 4:, :] = 0.25
    with torch.no_grad():
        p = torch.softmax(m.classify(composed[None]).double(), -1)[0, 1]
    expected = float(torch.log(p / (1 - p)))
    assert masked_model_output_f(m, img, 1, kept, baseline=0.25) == pytest.approx(expected, abs=1e-6)


def test_unknown_label_rejected():
    with pytest.raises(ConfigError):
        masked_model_output_f(tiny_vit(), torch.randn(3, 32, 32), 10, np.ones(64, bool))


# ---- multiorder_interaction ------------------------------------------------

@pytest.mark.parametrize("m", [0, 1, 3, 6])
def test_additive_game_has_no_interaction(m):
    w = np.random.default_rng(m).normal(size=8)
    est = multiorder_interaction(additive(w), 8, 1, 5, m)
    assert est.exact
    assert abs(est.value) < 1e-12


@pytest.mark.parametrize("m", [0, 2, 4, 6])
def test_pairwise_game_recovers_weight(m):
    est = multiorder_interaction(pairwise(2, 7, 1.5), 8, 2, 7, m)
    assert abs(est.value - 1.5) <= 1e-10


def random_dividends(n, rng, count=25):
    out = {}
    for _ in range(count):
        size = int(rng.integers(1, 5))
        out[frozenset(rng.choice(n, size=size, replace=False).tolist())] = float(rng.normal())
    return out


@pytest.mark.parametrize("seed", range(4))
def test_enumeration_matches_closed_form(seed):
    rng = np.random.default_rng(seed)
    div = random_dividends(8, rng)
    f = vectorised(harsanyi_game(div))
    for m in range(7):
        est = multiorder_interaction(f, 8, 0, 3, m)
        assert est.value == pytest.approx(harsanyi_interaction(div, 8, 0, 3, m), abs=1e-10)
        assert est.value == pytest.approx(enumerate_interaction(harsanyi_game(div), 8, 0, 3, m), abs=1e-10)


def test_sampling_is_unbiased_within_three_standard_errors():
    div = random_dividends(8, np.random.default_rng(11))
    f = vectorised(harsanyi_game(div))
    for m in (1, 2, 4, 5):
        exact = harsanyi_interaction(div, 8, 1, 2, m)
        est = multiorder_interaction(f, 8, 1, 2, m, samples=1000, seed=m, method="sample")
        assert not est.exact and est.n_contexts == 1000
        assert abs(est.value - exact) <= 3 * est.std_err + 1e-12


def test_sampling_error_shrinks_with_budget():
    div = random_dividends(8, np.random.default_rng(5))
    f = vectorised(harsanyi_game(div))
    exact = harsanyi_interaction(div, 8, 0, 1, 3)
    medians = []
    for budget in (10, 100, 1000):
        errs = [abs(multiorder_interaction(f, 8, 0, 1, 3, samples=budget, seed=s, method="sample").value - exact)
                for s in range(15)]
        medians.append(np.median(errs))
    assert medians[0] > medians[1] > medians[2]


def test_auto_switches_to_sampling_for_large_context_counts():
    f = additive(np.ones(64))
    assert multiorder_interaction(f, 64, 0, 1, 1).exact  # C(62, 1) contexts
    est = multiorder_interaction(f, 64, 0, 1, 20, samples=7)
    assert not est.exact and est.n_contexts == 7


def test_sampling_is_seeded():
    f = vectorised(harsanyi_game(random_dividends(12, np.random.default_rng(0))))
    a = multiorder_interaction(f, 12, 0, 1, 5, samples=50, seed=9, method="sample")
    b = multiorder_interaction(f, 12, 0, 1, 5, samples=50, seed=9, method="sample")
    assert a == b


@pytest.mark.parametrize("i, j, m", [(0, 1, -1), (0, 1, 7), (2, 2, 1), (0, 8, 1)])
def test_interaction_argument_errors(i, j, m):
    with pytest.raises(ConfigError):
        multiorder_interaction(additive(np.ones(8)), 8, i, j, m)


def test_zero_sample_budget_rejected():
    with pytest.raises(ConfigError):
        multiorder_interaction(additive(np.ones(8)), 8, 0, 1, 3, samples=0, method="sample")


# ---- interaction strength --------------------------------------------------

def test_strength_is_mean_normalised():
    j = interaction_strength([1.0, 3.0, 2.0, 6.0])
    assert j.mean() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(j, [1 / 3, 1, 2 / 3, 2])


def test_strength_of_all_zero_interactions_is_undefined():
    with pytest.raises(NumericError):
        interaction_strength([0.0, 0.0])


def test_constant_interaction_oracle_gives_flat_strength(shapes_val):
    # every pair interacts with weight 0.7 at every order
    def game(image, label):
        def f(kept):
            k = np.atleast_2d(kept).sum(1)
            return 0.7 * k * (k - 1) / 2
        return f

    rep = interaction_strength_distribution(None, shapes_val, n_images=2, pairs_per_image=2, contexts_per_pair=3,
                                            set_function=game)
    np.testing.assert_allclose(rep.mean_abs_I, 0.7, atol=1e-12)
    np.testing.assert_allclose(rep.J, 1.0, atol=1e-12)


def test_model_report_normalisation_and_layout(shapes_val, tmp_path):
    rep = interaction_strength_distribution(tiny_vit(), shapes_val, n_images=2, pairs_per_image=1,
                                            contexts_per_pair=2, seed=4)
    # m = round(r * 62), halves rounded up
    assert rep.orders == [0, 3, 6, 9, 12, 16, 19, 22, 25, 28, 31, 34, 37, 40, 43, 47, 50, 53, 56, 59]
    assert abs(np.mean(rep.J) - 1) <= 1e-6
    assert min(rep.J) >= 0
    assert sum(rep.J_area) == pytest.approx(1.0)
    rep.write(tmp_path)
    lines = (tmp_path / "interactions.csv").read_text().splitlines()
    assert lines[0] == "fraction,order,mean_abs_I,J,J_area" and len(lines) == 21
    assert (tmp_path / "interactions.json").exists()


def test_interaction_report_is_seed_deterministic(shapes_val):
    kw = dict(n_images=2, pairs_per_image=1, contexts_per_pair=2, fractions=(0.1, 0.5), seed=7)
    a = interaction_strength_distribution(tiny_vit(), shapes_val, **kw)
    b = interaction_strength_distribution(tiny_vit(), shapes_val, **kw)
    assert a.mean_abs_I == b.mean_abs_I


def test_degenerate_budget_rejected(shapes_val):
    with pytest.raises(ConfigError):
        interaction_strength_distribution(tiny_vit(), shapes_val, contexts_per_pair=0)


# ---- spectrum --------------------------------------------------------------

def test_constant_maps_floor_to_epsilon():
    planes = torch.full((2, 4, 8, 8), 3.0)
    assert feature_variance(planes) == 0.0
    amp0 = 3.0 * 64
    d = delta_log_amplitude(planes)
    assert math.isfinite(d)
    assert d == pytest.approx(math.log(1e-8) - math.log(amp0 + 1e-8), abs=1e-6)


def test_radial_bins_cover_every_frequency():
    radii, prof = radial_amplitude(torch.randn(1, 1, 8, 8))
    assert radii[0] == 0 and radii[-1] == 6 and len(prof) == len(radii)


def test_white_noise_has_flat_spectrum():
    g = torch.Generator().manual_seed(0)
    planes = torch.randn(16, 64, 8, 8, generator=g)
    assert abs(delta_log_amplitude(planes)) <= 0.2
    assert feature_variance(planes) == pytest.approx(1.0, abs=0.05)


def test_average_pooling_is_low_pass():
    g = torch.Generator().manual_seed(1)
    planes = torch.randn(16, 64, 16, 16, generator=g)
    pooled = nn.functional.avg_pool2d(planes, 2, stride=1)
    assert delta_log_amplitude(pooled) < delta_log_amplitude(planes) - 1.0


@pytest.mark.parametrize("family", ["transformer", "cnn"])
def test_profile_labels_follow_backbone_taps(family):
    m = build_backbone(BackboneConfig(family=family, depth=3, width=32, heads=2), seed=0)
    prof = spectrum_and_variance_profile(m, torch.randn(4, 3, 32, 32))
    assert prof.labels == m.depth_labels()
    assert all(math.isfinite(v) for v in prof.delta_log_amp + prof.variance)


def test_profile_writes_csv(tmp_path):
    m = build_backbone(BackboneConfig(depth=2, width=32, heads=2), seed=0)
    spectrum_and_variance_profile(m, torch.randn(2, 3, 32, 32)).write(tmp_path)
    lines = (tmp_path / "spectrum.csv").read_text().splitlines()
    assert lines[0] == "depth,side,delta_log_amp,variance"
    assert len(lines) == 1 + 3


# ---- saliency and occlusion -----------------------------------------------

class LinearImageModel(nn.Module):
    def __init__(self, weight):
        super().__init__()
        self.weight = nn.Parameter(weight)

    def classify(self, x):
        return x.flatten(1) @ self.weight.flatten(1).T


def test_constant_logits_rank_in_index_order():
    m = LinearImageModel(torch.zeros(2, 3, 16, 16))
    order = salient_patch_ranking(m, torch.randn(3, 16, 16), 0, 4)
    np.testing.assert_array_equal(order, np.arange(16))


def test_single_informative_patch_ranks_first():
    w = torch.zeros(2, 3, 16, 16)
    w[1, :, 8:12, 4:8] = 0.3  # patch (2, 1) -> index 9
    order = salient_patch_ranking(LinearImageModel(w), torch.randn(3, 16, 16), 1, 4)
    assert order[0] == 9
    np.testing.assert_array_equal(order[1:], [k for k in range(16) if k != 9])


def test_nonfinite_gradient_raises():
    class Broken(LinearImageModel):
        def classify(self, x):
            return torch.sqrt((x * 0).abs()).sum((1, 2, 3))[:, None].repeat(1, 2)

    with pytest.raises(NumericError):
        salient_patch_ranking(Broken(torch.zeros(1)), torch.randn(3, 16, 16), 0, 4)


def test_ranking_is_a_permutation():
    order = salient_patch_ranking(tiny_vit(), torch.randn(5, 3, 32, 32), torch.arange(5), 4)
    assert order.shape == (5, 64)
    assert all(sorted(o) == list(range(64)) for o in order)


def test_ratio_zero_is_clean_accuracy(shapes_val):
    m = tiny_vit()
    rep = occlusion_curve(m, shapes_val, [0.0, 0.3, 0.6, 0.9])
    assert rep.top1[0] == evaluate_accuracy(m, shapes_val)
    assert len(rep.rows()) == 4 and rep.n_eval == len(shapes_val)
    assert all(0 <= a <= 1 for a in rep.top1)


def test_full_occlusion_matches_flat_image_predictions(shapes_val):
    m = tiny_vit()
    rep = occlusion_curve(m, shapes_val, [1.0])
    x = torch.stack([shapes_val.raw([i])[0] for i in range(len(shapes_val))])
    from a2mim.data import normalize_images
    x = normalize_images(x, shapes_val.spec.mean, shapes_val.spec.std)
    flat = fill_with_mean(x, torch.ones(len(x), 32, 32, dtype=torch.bool))
    with torch.no_grad():
        pred = m.classify(flat).argmax(1).numpy()
    assert rep.top1[0] == pytest.approx(float(np.mean(pred == shapes_val.labels)))


@pytest.mark.parametrize("mode", ["random", "salient"])
def test_occlusion_is_seed_deterministic(shapes_val, mode):
    m = tiny_vit()
    a = occlusion_curve(m, shapes_val, [0.2, 0.5], mode=mode, seed=3)
    b = occlusion_curve(m, shapes_val, [0.2, 0.5], mode=mode, seed=3)
    assert a.top1 == b.top1


def test_occlusion_report_files(shapes_val, tmp_path):
    occlusion_curve(tiny_vit(), shapes_val, [0.0, 0.5]).write(tmp_path)
    assert (tmp_path / "occlusion.csv").read_text().splitlines()[0] == "ratio,top1"


@pytest.mark.parametrize("kwargs", [
    dict(ratios=[0.5, 0.2]),
    dict(ratios=[0.0, 1.5]),
    dict(ratios=[0.1], mode="sideways"),
])
def test_occlusion_argument_errors(shapes_val, kwargs):
    with pytest.raises(ConfigError):
        occlusion_curve(tiny_vit(), shapes_val, **kwargs)


def test_occlusion_empty_split(shapes_val):
    with pytest.raises(ConfigError):
        occlusion_curve(tiny_vit(), shapes_val.subset([]), [0.0])
