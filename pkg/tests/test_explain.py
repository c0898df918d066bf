import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.ndimage import uniform_filter

from helpers import random_model
from sic.bcos import extract_summary
from sic.explain import (
    ProvenanceError,
    alpha_channel,
    explain_prediction,
    explain_support,
    percentile_nearest_rank,
    project_latents,
    read_raw_map,
    render_rgba,
    silhouette,
    similarity_heatmap,
    write_bundle,
)
from sic.head import SupportEntry, SupportSet


def test_zero_image_zero_map_and_bias_logit():
    model = random_model(bias=-1.25)
    e = explain_prediction(model, np.zeros((6, 6, 6)), 1)
    assert not e.contributions.any()
    assert e.logit == -1.25
    np.testing.assert_array_equal(model.logits(np.zeros((1, 6, 6, 6))), -1.25)


@pytest.mark.parametrize("seed", range(6))
def test_completeness_residual(seed):
    model = random_model(seed, bias=0.3)
    x = np.random.default_rng(100 + seed).uniform(size=(6, 6, 6))
    mu = model.logits(x[None])[0]
    for c in range(3):
        e = explain_prediction(model, x, c, render=False)
        assert e.completeness_residual < 1e-3
        assert e.logit == pytest.approx(mu[c], rel=1e-5, abs=1e-7)
        assert e.support_evidence.sum() + e.bias == pytest.approx(mu[c], rel=1e-4, abs=1e-6)


def test_explanation_of_summed_logits_is_sum_of_maps():
    model = random_model(2)
    x = np.random.default_rng(9).uniform(size=(6, 6, 6))
    net = model.network()
    s = extract_summary(net, x)
    both = ((s.row(0) + s.row(2)).reshape(6, 6, 6) * x).sum(axis=0)
    a = explain_prediction(model, x, 0, render=False).contributions
    b = explain_prediction(model, x, 2, render=False).contributions
    np.testing.assert_allclose(both, a + b, rtol=1e-5, atol=1e-7)


def test_strategies_give_same_map():
    model = random_model(4)
    x = np.random.default_rng(4).uniform(size=(6, 6, 6))
    g = explain_prediction(model, x, 1, "gradient", render=False).contributions
    e = explain_prediction(model, x, 1, "explicit", render=False).contributions
    np.testing.assert_allclose(g, e, rtol=1e-4, atol=1e-6)


def test_support_self_explanation_sums_to_norm():
    model = random_model(1)
    for entry in model.supports.entries:
        se = explain_support(model, entry)
        assert abs(se.contributions.sum() - se.norm) <= 1e-3 * se.norm


def test_support_explanation_equals_prediction_on_single_support_unit():
    model = random_model(3, C=1, n_s=1, T=1.0)
    entry = model.supports.entries[0]
    a = explain_support(model, entry).contributions
    b = explain_prediction(model, entry.image, 0, render=False).contributions
    np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-7)


def test_support_without_image_raises_provenance_error():
    model = random_model(0)
    bare = SupportEntry(model.supports.entries[0].vector, 0, 0)
    with pytest.raises(ProvenanceError):
        explain_support(model, bare)


def test_flat_image_support_sum_check():
    model = random_model(5, C=1, n_s=1, T=1.0)
    img = np.full((6, 6, 6), 0.5, np.float32)
    v = np.maximum(model.backbone.embed(img[None])[0], 0)
    if v.any():
        se = explain_support(model, SupportEntry(v, 0, 0, img))
        assert se.contributions.sum() == pytest.approx(se.norm, rel=1e-3)


def test_uniform_weights_give_full_alpha_before_smoothing():
    alpha = alpha_channel(np.ones((6, 8, 8)), smooth=0)
    assert np.all(alpha == 1.0)


def test_hot_pixel_alpha_spreads_over_9x9():
    w = np.zeros((6, 32, 32))
    w[:, 16, 16] = 1.0
    alpha = alpha_channel(w)
    assert np.count_nonzero(alpha) == 81
    assert alpha.sum() == pytest.approx(1.0)
    assert alpha[12:21, 12:21].min() == pytest.approx(1 / 81)


def test_hot_pixel_at_edge_uses_replicate_padding():
    w = np.zeros((6, 32, 32))
    w[:, 0, 0] = 1.0
    ref = np.zeros((32, 32))
    ref[0, 0] = 1.0
    np.testing.assert_allclose(alpha_channel(w), uniform_filter(ref, 9, mode="nearest"))


def test_pair_normalisation_is_scale_invariant():
    w = np.zeros((6, 2, 2))
    w[0], w[3] = 0.3, 0.7
    img = np.ones((6, 2, 2))
    a = render_rgba(w, img)
    b = render_rgba(10 * w, img)
    assert a[0, 0, 0] == pytest.approx(0.3)
    np.testing.assert_allclose(a, b)


def test_negative_contribution_pixels_are_transparent():
    w = np.ones((6, 4, 4))
    w[:, 0, 0] = -1
    rgba = render_rgba(w, np.ones((6, 4, 4)), smooth=0)
    assert rgba[0, 0, 3] == 0 and rgba[1, 1, 3] == 1


@given(st.lists(st.floats(0, 100, allow_nan=False), min_size=1, max_size=50), st.floats(0.01, 1.0))
def test_nearest_rank_percentile_is_a_member(values, q):
    p = percentile_nearest_rank(np.array(values), q)
    assert p in values
    assert np.mean(np.array(values) <= p) >= q - 1e-12


def test_heatmap_separated_clusters():
    rng = np.random.default_rng(0)
    a = np.abs(rng.normal(size=(3, 8))) * 0.01 + np.r_[np.ones(4), np.zeros(4)] * 5
    b = np.abs(rng.normal(size=(3, 8))) * 0.01 + np.r_[np.zeros(4), np.ones(4)] * 5
    sup = SupportSet([SupportEntry(v.astype(np.float32), i, 0) for i, v in enumerate(a)] + [SupportEntry(v.astype(np.float32), 3 + i, 1) for i, v in enumerate(b)])
    rep = similarity_heatmap(sup)
    assert rep.silhouette > 0.9
    assert rep.intra_mean > rep.inter_mean
    assert rep.matrix.shape == (6, 6)


def test_heatmap_duplicate_supports_blocks_equal_norm():
    v = np.array([3.0, 4.0, 0.0], np.float32)
    u = np.array([0.0, 0.0, 2.0], np.float32)
    sup = SupportSet([SupportEntry(v, 0, 0), SupportEntry(v, 1, 0), SupportEntry(u, 2, 1), SupportEntry(u, 3, 1)])
    m = similarity_heatmap(sup).matrix
    np.testing.assert_allclose(m[:2, :2], 5.0)
    np.testing.assert_allclose(m[2:, 2:], 2.0)
    np.testing.assert_allclose(m[:2, 2:], 0.0)


def test_silhouette_undefined_for_one_cluster():
    assert silhouette(np.zeros((3, 2)), [0, 0, 0]) is None


def test_projection_properties():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(10, 2))
    pts -= pts.mean(axis=0)
    proj = project_latents(pts)
    d = lambda p: np.sqrt(((p[:, None] - p[None]) ** 2).sum(axis=2))
    np.testing.assert_allclose(d(proj), d(pts), atol=1e-10)
    line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
    assert np.allclose(project_latents(line)[:, 1], 0)
    hi = project_latents(rng.normal(size=(20, 6)) * [5, 3, 1, 1, 1, 1])
    assert hi[:, 0].var() >= hi[:, 1].var()


def test_bundle_round_trip(tmp_path):
    model = random_model(0)
    x = np.random.default_rng(0).uniform(size=(6, 6, 6))
    e = explain_prediction(model, x, 2)
    meta = write_bundle(str(tmp_path), e)
    assert set(os.listdir(tmp_path)) == {"explanation.f32", "explanation.json", "explanation.png"}
    raw = read_raw_map(str(tmp_path / "explanation.f32"), meta["shape"])
    np.testing.assert_array_equal(raw, e.contributions)
    side = json.loads((tmp_path / "explanation.json").read_text())
    assert side["class"] == 2 and side["support_ids"] == [20, 21]
