"""Local and global explanations, RGBA rendering and latent-space diagnostics."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import uniform_filter

from .bcos import LinearSummary, bcos_transform, contribution_map, extract_summary
from .head import HeadConfig, SICModel, SupportEntry, SupportSet
from .tensor import ContractError

NEGATIVE_MASS_LIMIT = 0.05


class ProvenanceError(LookupError):
    """A support entry lacks the source image needed to explain it."""


@dataclass
class Explanation:
    target_class: int
    logit: float
    bias: float
    contributions: np.ndarray  # [H,W] signed phi
    weights: np.ndarray  # [6,H,W] summary row for the class logit
    support_ids: list
    support_evidence: np.ndarray  # sim/T for this class's supports
    support_maps: list = field(default_factory=list)
    rgba: Optional[np.ndarray] = None

    @property
    def completeness_residual(self) -> float:
        target = self.logit - self.bias
        return abs(float(self.contributions.sum()) - target) / max(abs(target), 1e-12)

    def sidecar(self) -> dict:
        return {
            "shape": list(self.contributions.shape),
            "dtype": "float32",
            "class": int(self.target_class),
            "logit": float(self.logit),
            "bias": float(self.bias),
            "support_ids": [int(i) for i in self.support_ids],
            "support_evidence": [float(v) for v in self.support_evidence],
        }


@dataclass
class SupportExplanation:
    entry: SupportEntry
    contributions: np.ndarray
    weights: np.ndarray
    norm: float
    negative_mass_ratio: float

    @property
    def temperature_warning(self) -> bool:
        """Negative pixel mass above 5% of positive mass: the temperature is likely too small."""
        return self.negative_mass_ratio > NEGATIVE_MASS_LIMIT


def explain_prediction(model: SICModel, image6: np.ndarray, target_class: int, strategy: str = "gradient", with_supports: bool = False, render: bool = True) -> Explanation:
    """Contribution map of the class logit mu_c; sums to mu_c - b."""
    cfg = model.cfg
    if not 0 <= target_class < cfg.num_classes:
        raise ContractError(f"class {target_class} out of range [0, {cfg.num_classes})")
    net = model.network()
    summary = extract_summary(net, image6, strategy=strategy)
    row = summary.row(target_class).reshape(net.input_shape)
    image6 = np.asarray(image6, dtype=np.float32).reshape(net.input_shape)
    phi = (row * image6).sum(axis=0).astype(np.float32)
    fp = model.evidence(image6[None])[0]
    members = model.supports.for_class(target_class)
    ev = np.array([bcos_transform(fp, e.vector, cfg.B) / cfg.temperature for e in members])
    out = Explanation(
        target_class,
        float(summary.activations[target_class]) + cfg.bias,
        cfg.bias,
        phi,
        row.astype(np.float32),
        [e.source_index for e in members],
        ev,
    )
    if with_supports:
        out.support_maps = [explain_support(model, e).contributions for e in members]
    if render:
        out.rgba = render_rgba(row, image6, positive_only=True)
    return out


def support_unit_model(model: SICModel, entry: SupportEntry) -> SICModel:
    """Model whose single output is sim(f+, v) against one support (no temperature)."""
    cfg = HeadConfig(num_classes=1, temperature=1.0, bias=0.0, n_support=1, B=model.cfg.B)
    only = SupportEntry(entry.vector, entry.source_index, 0, entry.image)
    return SICModel(model.backbone, cfg, SupportSet([only]))


def explain_support(model: SICModel, entry: SupportEntry, strategy: str = "gradient") -> SupportExplanation:
    """Self-explanation of a support: its own image against its own vector, summing to ||v||."""
    if entry.image is None:
        raise ProvenanceError(f"support from sample {entry.source_index} has no stored source image")
    unit = support_unit_model(model, entry)
    net = unit.network()
    summary = extract_summary(net, entry.image, strategy=strategy)
    row = summary.row(0).reshape(net.input_shape)
    phi = (row * np.asarray(entry.image).reshape(net.input_shape)).sum(axis=0).astype(np.float32)
    pos = float(phi[phi > 0].sum())
    neg = float(-phi[phi < 0].sum())
    return SupportExplanation(entry, phi, row.astype(np.float32), float(np.linalg.norm(entry.vector.astype(np.float64))), neg / pos if pos > 0 else (np.inf if neg > 0 else 0.0))


def percentile_nearest_rank(values: np.ndarray, q: float) -> float:
    """Nearest-rank percentile; equals the maximum when fewer than 1/(1-q) values."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        return 0.0
    rank = int(np.ceil(q * v.size)) - 1
    return float(v[min(max(rank, 0), v.size - 1)])


def alpha_channel(weights: np.ndarray, hidden: Optional[np.ndarray] = None, smooth: int = 9) -> np.ndarray:
    """min(||w_(m,n)|| / p99.9, 1) (an indicator of w != 0 when p99.9 is 0), then a ``smooth`` x ``smooth`` mean filter (replicate edges).

    Pixels flagged in ``hidden`` get zero opacity before normalisation.
    """
    norms = np.sqrt((np.asarray(weights, dtype=np.float64) ** 2).sum(axis=0))
    if hidden is not None:
        norms = np.where(hidden, 0.0, norms)
    p = percentile_nearest_rank(norms, 0.999)
    # p = 0 with some nonzero pixels (e.g. one hot pixel): take the p -> 0+ limit
    alpha = (norms > 0).astype(np.float64) if p <= 0 else np.minimum(norms / p, 1.0)
    if smooth and smooth > 1:
        alpha = uniform_filter(alpha, size=smooth, mode="nearest")
    return alpha


def render_rgba(weights: np.ndarray, image6: np.ndarray, positive_only: bool = True, smooth: int = 9) -> np.ndarray:
    """[6,H,W] summary weights -> [H,W,4] RGBA in [0,1].

    Colour comes from each (c, c+3) weight pair normalised to sum to one.
    Pixels whose contribution is negative are made transparent when
    ``positive_only``.
    """
    w = np.asarray(weights, dtype=np.float64)
    x = np.asarray(image6, dtype=np.float64)
    if w.shape != x.shape or w.shape[0] != 6:
        raise ContractError(f"weights {w.shape} must match the [6,H,W] image {x.shape}")
    h, wd = w.shape[1:]
    peak = np.abs(w).max()
    if peak == 0:
        return np.zeros((h, wd, 4))
    wpos = np.clip(w / peak, 0, None)
    pair = wpos[:3] + wpos[3:]
    rgb = np.where(pair > 0, wpos[:3] / np.where(pair > 0, pair, 1), 0)
    hidden = (w * x).sum(axis=0) < 0 if positive_only else None
    alpha = alpha_channel(w, hidden, smooth)
    return np.concatenate([np.clip(rgb, 0, 1).transpose(1, 2, 0), np.clip(alpha, 0, 1)[..., None]], axis=2)


# -- latent-space diagnostics ------------------------------------------------


def similarity_matrix(vectors: np.ndarray, B: float = 2.0) -> np.ndarray:
    """M[i,j] = B-cos(v_i; v_j): the second argument acts as the (normalised) weight."""
    v = np.asarray(vectors, dtype=np.float64)
    n = len(v)
    return np.array([[bcos_transform(v[i], v[j], B) for j in range(n)] for i in range(n)])


def silhouette(points: np.ndarray, labels: Sequence[int]) -> Optional[float]:
    """Mean silhouette (b - a) / max(a, b) with Euclidean distance; None for < 2 clusters."""
    x = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if len(uniq) < 2:
        return None
    d = np.sqrt(((x[:, None] - x[None]) ** 2).sum(axis=2))
    s = np.zeros(len(x))
    for i in range(len(x)):
        same = labels == labels[i]
        if same.sum() == 1:
            continue  # singleton cluster scores 0
        a = d[i, same].sum() / (same.sum() - 1)
        b = min(d[i, labels == u].mean() for u in uniq if u != labels[i])
        m = max(a, b)
        s[i] = 0.0 if m == 0 else (b - a) / m
    return float(s.mean())


@dataclass
class HeatmapReport:
    matrix: np.ndarray
    labels: np.ndarray
    silhouette: Optional[float]

    @property
    def intra_mean(self) -> float:
        same = self.labels[:, None] == self.labels[None]
        return float(self.matrix[same].mean())

    @property
    def inter_mean(self) -> float:
        diff = self.labels[:, None] != self.labels[None]
        return float(self.matrix[diff].mean()) if diff.any() else float("nan")

    def to_dict(self) -> dict:
        return {
            "matrix": self.matrix.tolist(),
            "labels": self.labels.tolist(),
            "silhouette": self.silhouette,
            "intra_mean": self.intra_mean,
            "inter_mean": self.inter_mean,
        }


def similarity_heatmap(supports: SupportSet, B: float = 2.0) -> HeatmapReport:
    if len(supports.classes) < 2:
        raise ContractError("similarity heatmap needs at least two classes")
    v = supports.vectors()
    labels = supports.class_ids()
    return HeatmapReport(similarity_matrix(v, B), labels, silhouette(v, labels))


def project_latents(latents: np.ndarray) -> np.ndarray:
    """Top-2 principal-component coordinates of mean-centred latents."""
    x = np.asarray(latents, dtype=np.float64)
    if len(x) < 3:
        raise ContractError("need at least 3 points to project")
    x = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(x, full_matrices=False)
    out = np.zeros((len(x), 2))
    k = min(2, int((s > 1e-12 * max(s[0], 1e-300)).sum()))
    out[:, :k] = x @ vt[:k].T
    return out


# -- bundle output ---------------------------------------------------------------


def write_bundle(out_dir: str, expl: Explanation, stem: str = "explanation") -> dict:
    """Raw map as little-endian float32 grid + JSON sidecar + RGBA PNG."""
    from PIL import Image

    os.makedirs(out_dir, exist_ok=True)
    raw = os.path.join(out_dir, f"{stem}.f32")
    expl.contributions.astype("<f4").tofile(raw)
    meta = expl.sidecar()
    with open(os.path.join(out_dir, f"{stem}.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
    if expl.rgba is not None:
        Image.fromarray(np.round(expl.rgba * 255).astype(np.uint8), "RGBA").save(os.path.join(out_dir, f"{stem}.png"))
    return meta


def read_raw_map(path: str, shape: Sequence[int]) -> np.ndarray:
    return np.fromfile(path, dtype="<f4").reshape(tuple(shape))
