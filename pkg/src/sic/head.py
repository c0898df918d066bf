"""Evidence predictor: non-negative latents, B-cos similarity to class supports.

The class logit is ``b + sum_i sim(f+, v_i^c) / T``. Supports are evidence
vectors of real training images; after each epoch they are re-chosen as the
samples nearest to per-class k-means centroids.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import tensor as T
from .bcos import NORM_FLOOR, BCosNetwork, _check_exponent, _scale_np, bcos_transform
from .tensor import ContractError, Tensor


class DegenerateSupportError(ValueError):
    """A support vector has zero norm, so similarity against it is undefined."""


class DatasetError(ValueError):
    """The data cannot satisfy a per-class requirement."""


@dataclass(frozen=True)
class HeadConfig:
    num_classes: int
    temperature: float = 30.0
    bias: float = 0.0
    n_support: int = 3
    B: float = 2.0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.n_support < 1:
            raise ValueError("n_support must be >= 1")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        _check_exponent(self.B)


@dataclass
class SupportEntry:
    vector: np.ndarray
    source_index: int
    class_id: int
    image: Optional[np.ndarray] = field(default=None, repr=False)


@dataclass
class SupportSet:
    entries: list

    def for_class(self, c: int) -> list:
        return [e for e in self.entries if e.class_id == c]

    @property
    def classes(self) -> list:
        return sorted({e.class_id for e in self.entries})

    def vectors(self) -> np.ndarray:
        return np.stack([e.vector for e in self.entries]).astype(np.float32)

    def class_ids(self) -> np.ndarray:
        return np.array([e.class_id for e in self.entries], dtype=np.int64)

    def source_ids(self) -> np.ndarray:
        return np.array([e.source_index for e in self.entries], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.entries)


def evidence(f):
    """ReLU: f+ = max(f, 0), elementwise."""
    if isinstance(f, Tensor):
        return T.relu(f)
    f = np.asarray(f, dtype=np.float32)
    return np.maximum(f, 0).astype(np.float32)


def similarity(f_plus, v, B: float = 2.0) -> float:
    v = np.asarray(v, dtype=np.float64)
    if not np.any(v):
        raise DegenerateSupportError("support vector is all zeros")
    return bcos_transform(f_plus, v, B)


def logits(f_plus, supports: SupportSet, cfg: HeadConfig) -> np.ndarray:
    """mu_c = b + sum_i sim(f+, v_i^c) / T, for a single evidence vector."""
    out = np.full(cfg.num_classes, cfg.bias, dtype=np.float64)
    for c in range(cfg.num_classes):
        members = supports.for_class(c)
        if not members:
            raise ContractError(f"class {c} has no support vectors")
        out[c] += sum(similarity(f_plus, e.vector, cfg.B) for e in members) / cfg.temperature
    return out


def support_evidence(f_plus, supports: SupportSet, cfg: HeadConfig) -> np.ndarray:
    """Per-support terms sim/T; for each class these sum to mu_c - b."""
    return np.array([similarity(f_plus, e.vector, cfg.B) / cfg.temperature for e in supports.entries])


# -- differentiable head --------------------------------------------------------


def group_matrix(class_ids: Sequence[int], num_classes: int) -> np.ndarray:
    g = np.zeros((len(class_ids), num_classes), dtype=np.float32)
    g[np.arange(len(class_ids)), np.asarray(class_ids)] = 1
    return g


def similarity_scores(f_plus: Tensor, v: Tensor, B: float, frozen: bool = False) -> Tensor:
    """[N,d] evidence x [K,d] supports -> [N,K] B-cos similarities."""
    k = v.shape[0]
    vn = T.sqrt(T.tsum(T.mul(v, v), axis=1))
    v_hat = T.div(v, T.expand(T.reshape(T.clamp_min(vn, NORM_FLOOR), (k, 1)), v.shape))
    lin = T.matmul(f_plus, T.transpose(v_hat))
    if B == 1:
        return lin
    fn = T.sqrt(T.tsum(T.mul(f_plus, f_plus), axis=1))
    fn = T.expand(T.reshape(fn, (f_plus.shape[0], 1)), lin.shape)
    cos = T.div(lin, T.clamp_min(fn, NORM_FLOOR))
    scale = T.abs_pow(cos, B - 1)
    if frozen:
        scale = scale.detach()
    return T.mul(lin, scale)


def class_scores(f_plus: Tensor, v: Tensor, class_ids: Sequence[int], cfg: HeadConfig, frozen: bool = False) -> Tensor:
    """[N,C] logits without the bias: sum_i sim_i / T grouped by class."""
    sims = similarity_scores(f_plus, v, cfg.B, frozen)
    g = Tensor(group_matrix(class_ids, cfg.num_classes), dtype=sims.dtype)
    return T.mul(T.matmul(sims, g), 1.0 / cfg.temperature)


class Evidence:
    """ReLU layer; its summary is the diagonal of the active mask."""

    kind = "evidence"

    def parameters(self) -> list:
        return []

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x: Tensor, frozen: bool = False) -> Tensor:
        return T.relu(x)

    def summary_matrix(self, a: np.ndarray) -> np.ndarray:
        return np.diag((np.asarray(a).ravel() > 0).astype(np.float64))


class SimilarityHead:
    """Fixed-support head as a summarizable layer; outputs mu_c - b."""

    kind = "similarity_head"

    def __init__(self, supports: SupportSet, cfg: HeadConfig):
        for c in range(cfg.num_classes):
            if not supports.for_class(c):
                raise ContractError(f"class {c} has no support vectors")
        vecs = supports.vectors()
        if np.any(~vecs.any(axis=1)):
            raise DegenerateSupportError("support set contains a zero vector")
        self.supports = supports
        self.cfg = cfg
        self.v = Tensor(vecs)
        self.class_ids = supports.class_ids()

    def parameters(self) -> list:
        return []

    def out_shape(self, in_shape):
        return (self.cfg.num_classes,)

    def forward(self, x: Tensor, frozen: bool = False) -> Tensor:
        return class_scores(x, Tensor(self.v.data, dtype=x.dtype), self.class_ids, self.cfg, frozen)

    def summary_matrix(self, a: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=np.float64).ravel()
        v = self.v.data.astype(np.float64)
        v_hat = v / np.linalg.norm(v, axis=1, keepdims=True)
        lin = v_hat @ a
        scale = _scale_np(lin, np.linalg.norm(a), self.cfg.B)
        per_support = scale[:, None] * v_hat / self.cfg.temperature
        return group_matrix(self.class_ids, self.cfg.num_classes).T.astype(np.float64) @ per_support


class SICModel:
    """Backbone + evidence predictor with a fixed support set."""

    def __init__(self, backbone: BCosNetwork, cfg: HeadConfig, supports: Optional[SupportSet] = None):
        self.backbone = backbone
        self.cfg = cfg
        self.supports = supports

    def parameters(self) -> list:
        return self.backbone.parameters()

    def network(self) -> BCosNetwork:
        """Backbone extended with the evidence and head layers; output is mu - b."""
        if self.supports is None:
            raise ContractError("model has no extracted supports")
        layers = self.backbone.layers + [Evidence(), SimilarityHead(self.supports, self.cfg)]
        return BCosNetwork(layers, self.backbone.input_shape)

    def logits(self, images: np.ndarray) -> np.ndarray:
        """[N,6,H,W] -> [N,C] logits including the bias."""
        net = self.network()
        images = np.asarray(images, dtype=np.float32)
        if images.ndim == 3:
            images = images[None]
        return net.embed(images) + np.float32(self.cfg.bias)

    def evidence(self, images: np.ndarray) -> np.ndarray:
        return evidence(self.backbone.embed(images))


# -- support lifecycle -------------------------------------------------------------


def _per_class_pool(labels: np.ndarray, eligible: Optional[np.ndarray] = None) -> dict:
    labels = np.asarray(labels)
    classes = labels.argmax(axis=1) if labels.ndim == 2 else labels
    ok = np.ones(len(classes), bool) if eligible is None else np.asarray(eligible, bool)
    if labels.ndim == 2:
        ok &= labels.sum(axis=1) == 1
    n_classes = labels.shape[1] if labels.ndim == 2 else int(classes.max()) + 1
    return {c: np.flatnonzero(ok & (classes == c)) for c in range(n_classes)}


def sample_support_indices(labels: np.ndarray, n_support: int, rng: np.random.Generator, exclude=None) -> dict:
    """Uniform without-replacement draw of ``n_support`` sample indices per class.

    ``labels`` is multi-hot [N,C] (only single-positive rows are eligible) or
    integer classes. Excluded indices are avoided unless that would leave a
    class short.
    """
    pools = _per_class_pool(labels)
    excl = set() if exclude is None else set(int(i) for i in exclude)
    out = {}
    for c, pool in pools.items():
        if len(pool) < n_support:
            raise DatasetError(f"class {c} has {len(pool)} eligible samples, needs {n_support}")
        preferred = np.array([i for i in pool if i not in excl], dtype=np.int64) if excl else pool
        src = preferred if len(preferred) >= n_support else pool
        out[c] = np.sort(rng.choice(src, size=n_support, replace=False))
    return out


def sample_supports(latents: Mapping[int, np.ndarray], n_support: int, rng: np.random.Generator, ids: Optional[Mapping] = None) -> SupportSet:
    """Random support set from per-class evidence vectors ``{class: [n,d]}``."""
    entries = []
    for c in sorted(latents):
        vecs = np.asarray(latents[c])
        if len(vecs) < n_support:
            raise DatasetError(f"class {c} has {len(vecs)} eligible samples, needs {n_support}")
        pick = np.sort(rng.choice(len(vecs), size=n_support, replace=False))
        src = ids[c] if ids is not None else np.arange(len(vecs))
        entries += [SupportEntry(vecs[i].astype(np.float32), int(src[i]), c) for i in pick]
    return SupportSet(entries)


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centers = [points[rng.integers(n)]]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers.append(points[idx])
        d2 = np.minimum(d2, ((points - points[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _lloyd(points: np.ndarray, centers: np.ndarray, max_iter: int) -> tuple:
    assign = None
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new = d2.argmin(axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(len(centers)):
            members = points[assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)
            else:
                # reseed from the point farthest from its current centroid
                far = d2[np.arange(len(points)), assign].argmax()
                centers[j] = points[far]
                assign[far] = j
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    assign = d2.argmin(axis=1)
    sse = float(d2[np.arange(len(points)), assign].sum())
    return centers, assign, sse


EXHAUSTIVE_PARTITIONS = 5000


def _stirling2(n: int, k: int) -> int:
    row = [1] + [0] * k
    for i in range(1, n + 1):
        row = [0] + [j * row[j] + row[j - 1] for j in range(1, k + 1)]
    return row[k]


def _partition_centroids(points: np.ndarray, k: int):
    """Centroids of every partition of the points into k non-empty groups."""
    n = len(points)

    def grow(labels, used):
        i = len(labels)
        if i == n:
            if used == k:
                lab = np.array(labels)
                yield np.array([points[lab == j].mean(axis=0) for j in range(k)])
            return
        if k - used > n - i:
            return
        for j in range(min(used + 1, k)):
            yield from grow(labels + [j], max(used, j + 1))

    yield from grow([], 0)


def kmeans(points, k: int, rng: np.random.Generator, max_iter: int = 100, n_init: int = 10) -> np.ndarray:
    """Lloyd's algorithm; best restart by SSE.

    Restarts are ``n_init`` k-means++ seedings. When the points admit at most
    EXHAUSTIVE_PARTITIONS k-partitions, the centroids of every partition are
    added as seeds too; the SSE optimum is a Lloyd fixed point, so tiny
    inputs always reach it.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    if k < 1 or len(pts) < k:
        raise ContractError(f"kmeans needs at least k={k} points, got {len(pts)}")
    seeds = [_kmeans_pp(pts, k, rng) for _ in range(n_init)]
    if _stirling2(len(pts), k) <= EXHAUSTIVE_PARTITIONS:
        seeds += list(_partition_centroids(pts, k))
    best, best_sse = None, np.inf
    for init in seeds:
        centers, _, sse = _lloyd(pts, init, max_iter)
        if best is None or sse < best_sse - 1e-12 * max(1.0, best_sse):
            best, best_sse = centers, sse
    return best


def nearest_index(vectors: np.ndarray, target: np.ndarray, skip_zero: bool = True) -> int:
    """Row closest to ``target``; ties go to the lowest index, zero rows are skipped."""
    vectors = np.asarray(vectors, dtype=np.float64)
    d = np.sqrt(((vectors - target) ** 2).sum(axis=1))
    if skip_zero:
        d = np.where(vectors.any(axis=1), d, np.inf)
    if not np.isfinite(d).any():
        raise DegenerateSupportError("every candidate evidence vector is zero")
    return int(np.argmin(d))


def extract_supports(
    latents: Mapping[int, np.ndarray],
    n_support: int,
    rng: np.random.Generator,
    ids: Optional[Mapping[int, Sequence[int]]] = None,
    images: Optional[Mapping[int, np.ndarray]] = None,
) -> SupportSet:
    """Per class: k-means with k = n_support, then snap each centroid to its nearest sample."""
    entries = []
    for c in sorted(latents):
        vecs = np.asarray(latents[c], dtype=np.float32)
        if len(vecs) < n_support:
            raise DatasetError(f"class {c} has {len(vecs)} eligible samples, needs {n_support}")
        src = np.asarray(ids[c]) if ids is not None else np.arange(len(vecs))
        centroids = kmeans(vecs, n_support, rng)
        for g in centroids:
            i = nearest_index(vecs, g)
            img = None if images is None else images[c][i]
            entries.append(SupportEntry(vecs[i].copy(), int(src[i]), c, img))
    return SupportSet(entries)
