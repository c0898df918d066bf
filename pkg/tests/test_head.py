import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import numeric_grad, rel_err
from sic import tensor as T
from sic.explain import silhouette
from sic.head import (
    DatasetError,
    DegenerateSupportError,
    HeadConfig,
    SupportEntry,
    SupportSet,
    class_scores,
    evidence,
    extract_supports,
    kmeans,
    logits,
    nearest_index,
    sample_support_indices,
    sample_supports,
    similarity,
)
from sic.tensor import ContractError, Tensor


def test_evidence_examples():
    assert not evidence(np.array([-1.0, -2.0])).any()
    assert np.array_equal(evidence(np.array([0.0, 3.0])), [0, 3])
    assert np.array_equal(evidence(np.array([-1.0, 2.0])), [0, 2])


def test_similarity_examples():
    v = np.array([3.0, 4.0])
    assert similarity(v, v) == pytest.approx(5.0)
    assert similarity([1, 0], [0, 1]) == 0.0
    assert similarity([1, 1], [2, 0], B=2) == pytest.approx(1 / np.sqrt(2))
    with pytest.raises(DegenerateSupportError):
        similarity([1, 0], [0, 0])


def _supports(vectors, classes):
    return SupportSet([SupportEntry(np.asarray(v, np.float32), i, c) for i, (v, c) in enumerate(zip(vectors, classes))])


def test_logit_examples():
    sup = _supports([[1, 0, 0], [0, 2, 0]], [0, 1])
    cfg = HeadConfig(2, temperature=30, bias=-0.5, n_support=1)
    assert np.allclose(logits(np.array([0, 0, 1.0]), sup, cfg), -0.5)
    mu = logits(np.array([0, 2.0, 0]), sup, cfg)
    assert mu[1] == pytest.approx(-0.5 + 2 / 30)
    assert mu[0] == pytest.approx(-0.5)
    f = np.array([1.0, 1.0, 0.3])
    doubled = HeadConfig(2, temperature=60, bias=-0.5, n_support=1)
    np.testing.assert_allclose(logits(f, sup, doubled) + 0.5, (logits(f, sup, cfg) + 0.5) / 2)


def test_batched_head_matches_scalar_closed_form():
    rng = np.random.default_rng(0)
    vecs = np.abs(rng.normal(size=(6, 5))).astype(np.float32).astype(np.float64)  # same values the float32 support set stores
    cls = [0, 0, 1, 1, 2, 2]
    cfg = HeadConfig(3, temperature=7, n_support=2)
    f = np.abs(rng.normal(size=(4, 5)))
    mu = class_scores(Tensor(f), Tensor(vecs), cls, cfg).data
    for i in range(4):
        np.testing.assert_allclose(mu[i], logits(f[i], _supports(vecs, cls), cfg), rtol=1e-10)


def test_head_similarity_gradients():
    rng = np.random.default_rng(1)
    v0 = np.abs(rng.normal(size=(4, 6))) + 0.1
    f0 = np.abs(rng.normal(size=(3, 6))) + 0.1  # strictly positive: |cos| well above 0
    cls = [0, 0, 1, 1]
    cfg = HeadConfig(2, temperature=3, n_support=2)
    proj = rng.normal(size=(3, 2))

    def loss(f, v):
        return T.tsum(T.mul(class_scores(f, v, cls, cfg), Tensor(proj)))

    f, v = Tensor(f0, requires_grad=True), Tensor(v0, requires_grad=True)
    loss(f, v).backward()
    assert rel_err(f.grad, numeric_grad(lambda x: loss(Tensor(x), Tensor(v0)).item(), f0)) < 1e-3
    assert rel_err(v.grad, numeric_grad(lambda x: loss(Tensor(f0), Tensor(x)).item(), v0)) < 1e-3


def test_sampling_examples():
    labels = np.array([0, 0, 0, 1, 1, 1, 1])
    picks = sample_support_indices(labels, 3, np.random.default_rng(0))
    assert np.array_equal(picks[0], [0, 1, 2])
    again = sample_support_indices(labels, 3, np.random.default_rng(0))
    assert all(np.array_equal(picks[c], again[c]) for c in picks)
    with pytest.raises(DatasetError):
        sample_support_indices(labels, 4, np.random.default_rng(0))


def test_sampling_prefers_non_excluded():
    labels = np.array([0] * 6)
    for s in range(20):
        p = sample_support_indices(labels, 3, np.random.default_rng(s), exclude=[0, 1, 2])[0]
        assert set(p) <= {3, 4, 5}
    # falls back to the full pool when exclusion would leave the class short
    p = sample_support_indices(labels, 3, np.random.default_rng(0), exclude=[0, 1, 2, 3])[0]
    assert len(p) == 3


def test_sampling_frequencies_are_uniform():
    n, k, trials = 7, 3, 10_000
    labels = np.zeros(n, dtype=int)
    counts = np.zeros(n)
    for s in range(trials):
        counts[sample_support_indices(labels, k, np.random.default_rng(s))[0]] += 1
    p = k / n
    sigma = np.sqrt(trials * p * (1 - p))
    assert np.all(np.abs(counts - trials * p) < 3 * sigma)


def test_sample_supports_ids():
    lat = {0: np.eye(4)[:3] + 0.1, 1: np.eye(4)[1:] + 0.1}
    sup = sample_supports(lat, 2, np.random.default_rng(0), ids={0: [10, 11, 12], 1: [20, 21, 22]})
    assert len(sup) == 4
    for e in sup.entries:
        assert e.source_index // 10 == e.class_id + 1


def _sse(points, centers):
    return float(((points[:, None] - centers[None]) ** 2).sum(axis=2).min(axis=1).sum())


def _brute_force_sse(points, k):
    """Minimum within-cluster SSE over every labelling of the points into k non-empty groups."""
    best = np.inf
    for lab in itertools.product(range(k), repeat=len(points)):
        lab = np.array(lab)
        if len(set(lab)) < k:
            continue
        best = min(best, sum(((points[lab == j] - points[lab == j].mean(axis=0)) ** 2).sum() for j in range(k)))
    return best


def test_kmeans_examples():
    pts = np.array([[0, 0], [0, 1], [10, 0], [10, 1]], float)
    c = kmeans(pts, 2, np.random.default_rng(0))
    assert sorted(map(tuple, np.round(c, 12))) == [(0, 0.5), (10, 0.5)]
    c = kmeans(pts, 4, np.random.default_rng(0))
    assert sorted(map(tuple, c)) == sorted(map(tuple, pts))
    assert np.array_equal(kmeans([[2.0, 3.0]], 1, np.random.default_rng(0)), [[2.0, 3.0]])
    with pytest.raises(ContractError):
        kmeans(pts, 5, np.random.default_rng(0))


@given(st.integers(1, 8), st.integers(1, 3), st.integers(1, 3), st.booleans(), st.integers(0, 2**31))
@settings(max_examples=150, deadline=None)
def test_kmeans_matches_brute_force(n, k, d, lattice, seed):
    k = min(k, n)
    rng = np.random.default_rng(seed)
    pts = rng.integers(0, 3, size=(n, d)).astype(float) if lattice else rng.normal(size=(n, d))
    got = _sse(pts, kmeans(pts, k, np.random.default_rng(seed)))
    want = _brute_force_sse(pts, k)
    assert got == pytest.approx(want, rel=1e-9, abs=1e-12)


def test_kmeans_reseeds_empty_cluster():
    # duplicate points force empty clusters in Lloyd; k distinct centres still come back
    pts = np.array([[0.0, 0.0]] * 5 + [[1.0, 0.0]])
    c = kmeans(pts, 2, np.random.default_rng(0))
    assert _sse(pts, c) == pytest.approx(0.0)


def test_extract_supports_examples():
    same = {0: np.tile([[1.0, 2.0]], (5, 1))}
    sup = extract_supports(same, 3, np.random.default_rng(0))
    assert all(np.array_equal(e.vector, [1, 2]) and e.source_index == 0 for e in sup.entries)

    pts = np.array([[0, 0], [0, 1], [10, 0], [10, 1]], np.float32) + np.float32(0.5)
    sup = extract_supports({0: pts}, 2, np.random.default_rng(0), ids={0: [100, 101, 102, 103]})
    assert sorted(e.source_index for e in sup.entries) == [100, 102]  # lowest index wins the tie


def test_extract_supports_sources_belong_to_class():
    rng = np.random.default_rng(3)
    lat = {c: np.abs(rng.normal(size=(8, 4))) + c for c in range(3)}
    ids = {c: list(range(100 * c, 100 * c + 8)) for c in range(3)}
    sup = extract_supports(lat, 3, np.random.default_rng(0), ids=ids)
    for e in sup.entries:
        assert e.source_index in ids[e.class_id]
        idx = ids[e.class_id].index(e.source_index)
        assert np.array_equal(e.vector, lat[e.class_id][idx].astype(np.float32))
    again = extract_supports(lat, 3, np.random.default_rng(0), ids=ids)
    assert np.array_equal(again.source_ids(), sup.source_ids())


def test_nearest_index_skips_zero_rows():
    vecs = np.array([[0.0, 0.0], [3.0, 3.0]])
    assert nearest_index(vecs, np.array([0.1, 0.1])) == 1
    with pytest.raises(DegenerateSupportError):
        nearest_index(np.zeros((2, 2)), np.zeros(2))


def _brute_silhouette(points, labels):
    s = []
    for i, p in enumerate(points):
        dist = {}
        for j, q in enumerate(points):
            if j != i:
                dist.setdefault(labels[j], []).append(np.linalg.norm(p - q))
        own = dist.get(labels[i], [])
        if not own:
            s.append(0.0)
            continue
        a = sum(own) / len(own)
        b = min(sum(v) / len(v) for c, v in dist.items() if c != labels[i])
        s.append((b - a) / max(a, b) if max(a, b) > 0 else 0.0)
    return sum(s) / len(s)


def test_silhouette_hand_formula():
    pts = np.array([[0, 0], [0, 1], [10, 0], [10, 1]], float)
    a, b = 1.0, (10 + np.sqrt(101)) / 2
    assert silhouette(pts, [0, 0, 1, 1]) == pytest.approx(1 - a / b)


@given(st.integers(2, 8), st.integers(2, 3), st.integers(0, 2**31))
@settings(max_examples=100, deadline=None)
def test_silhouette_matches_brute_force(n, k, seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n, 2))
    labels = list(rng.integers(0, k, size=n))
    if len(set(labels)) < 2:
        labels[0], labels[-1] = 0, 1
    assert silhouette(pts, labels) == pytest.approx(_brute_silhouette(pts, labels), abs=1e-12)


def test_head_config_validation():
    with pytest.raises(ValueError):
        HeadConfig(3, temperature=0)
    with pytest.raises(ValueError):
        HeadConfig(3, n_support=0)
