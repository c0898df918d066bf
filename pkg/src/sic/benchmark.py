"""Explanation-quality metrics on FunnyBirds-lite scenes.

Every score is built from part-level importances (sum of |phi| inside each
part mask):

* PC  keep the top parts covering 80% of part importance; is the prediction kept?
* DC  delete those parts instead; does the prediction change?
* CSDC  delete all but a minimal class-identifying part subset; are those parts ranked first?
* D   1 - background importance / total importance.
* SD  Spearman rank correlation of part importance against the logit drop
      from deleting that part, mapped to [0, 1] as (rho + 1) / 2.
* TS  on a two-class chimera, does each class's explanation favour its own parts?
* BI  mean D after replacing the background.

A prediction counts as class c only when c is the unique argmax.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, replace
from typing import Protocol, Sequence

import numpy as np
from scipy.stats import spearmanr

from . import funnybirds as fb
from .explain import explain_prediction
from .head import SICModel

COVERAGE = 0.8


class Explainable(Protocol):
    num_classes: int

    def logits(self, scenes: Sequence[fb.SceneInstance]) -> np.ndarray: ...

    def explain(self, scene: fb.SceneInstance, target_class: int) -> np.ndarray: ...


class SICAdapter:
    def __init__(self, model: SICModel):
        self.model = model
        self.num_classes = model.cfg.num_classes

    def logits(self, scenes):
        return self.model.logits(np.stack([s.image6 for s in scenes]))

    def explain(self, scene, target_class):
        return explain_prediction(self.model, scene.image6, target_class, render=False).contributions


class OracleAdapter:
    """Ground-truth decision rule and explainer read from scene metadata.

    Logit of class c = number of visible parts carrying c's attribute;
    the explanation spreads unit mass uniformly over each such part's mask.
    """

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.book = fb.codebook(num_classes)

    def _matches(self, scene, c):
        return [p for p in scene.present() if scene.attrs[p] == self.book[c][p]]

    def logits(self, scenes):
        return np.array([[len(self._matches(s, c)) for c in range(self.num_classes)] for s in scenes], dtype=np.float64)

    def explain(self, scene, target_class):
        phi = np.zeros((fb.CANVAS, fb.CANVAS))
        for p in self._matches(scene, target_class):
            m = scene.masks[p]
            phi[m] += 1.0 / m.sum()
        return phi


class UniformAdapter(OracleAdapter):
    """Oracle decisions with a constant explanation map."""

    def explain(self, scene, target_class):
        return np.ones((fb.CANVAS, fb.CANVAS))


def part_importance(phi: np.ndarray, masks: np.ndarray, background: np.ndarray = None) -> tuple:
    """(per-part sum of |phi|, background sum of |phi|), no size normalisation."""
    a = np.abs(np.asarray(phi, dtype=np.float64))
    masks = np.asarray(masks, bool)
    if a.shape != masks.shape[1:]:
        raise ValueError(f"map shape {a.shape} does not match masks {masks.shape[1:]}")
    parts = np.array([a[m].sum() for m in masks])
    bg = ~masks.any(axis=0) if background is None else np.asarray(background, bool)
    return parts, float(a[bg].sum())


def distractability(parts: np.ndarray, bg: float) -> float:
    total = parts.sum() + bg
    return 0.0 if total <= 0 else float(1 - bg / total)


def top_parts(scores: np.ndarray, present: Sequence[int], coverage: float = COVERAGE) -> list:
    """Smallest prefix of the importance ranking covering ``coverage`` of the present parts' mass."""
    present = list(present)
    s = np.asarray(scores, dtype=np.float64)
    total = s[present].sum()
    if total <= 0:
        return []
    order = sorted(present, key=lambda p: (-s[p], p))
    out, acc = [], 0.0
    for p in order:
        out.append(p)
        acc += s[p]
        if acc >= coverage * total * (1 - 1e-9):
            break
    return out


def unique_argmax(mu: np.ndarray) -> int:
    """Index of the strict maximum, or -1 on a tie."""
    mu = np.asarray(mu)
    best = mu.max()
    hits = np.flatnonzero(mu == best)
    return int(hits[0]) if len(hits) == 1 else -1


def sufficient_subset(book: np.ndarray, c: int, present: Sequence[int], rng: np.random.Generator) -> list:
    """A smallest set of parts on which only class c's attribute tuple matches."""
    present = list(present)
    for r in range(1, len(present) + 1):
        cands = [
            list(S)
            for S in itertools.combinations(present, r)
            if sum(np.all(book[k, list(S)] == book[c, list(S)]) for k in range(len(book))) == 1
        ]
        if cands:
            return cands[int(rng.integers(len(cands)))]
    return present


@dataclass
class MetricsReport:
    A: float
    BI: float
    CSDC: float
    PC: float
    DC: float
    D: float
    SD: float
    TS: float
    completeness: float
    correctness: float
    contrastivity: float
    n_scenes: int
    n_correct: int

    def to_dict(self) -> dict:
        return asdict(self)


def metric_suite(adapter: Explainable, scenes: Sequence[fb.SceneInstance], seed: int = 0) -> MetricsReport:
    rng = np.random.default_rng(seed)
    C = adapter.num_classes
    book = fb.codebook(C)
    scenes = list(scenes)
    base_mu = adapter.logits(scenes)
    preds = [unique_argmax(m) for m in base_mu]

    acc, d_vals, pc, dc, sd, csdc, ts, bi = [], [], [], [], [], [], [], []
    for s, mu, pred in zip(scenes, base_mu, preds):
        c = s.class_id
        acc.append(float(pred == c))
        phi = adapter.explain(s, c)
        parts, bg = part_importance(phi, s.masks, s.background_mask)
        d_vals.append(distractability(parts, bg))
        present = s.present()

        # single deletion: importance vs logit drop
        dels = [fb.delete_parts(s, [p]) for p in present]
        drops = mu[c] - adapter.logits(dels)[:, c]
        imp = parts[present]
        if np.ptp(imp) == 0 or np.ptp(drops) == 0:
            rho = 0.0
        else:
            rho = float(spearmanr(imp, drops).statistic)
            rho = 0.0 if np.isnan(rho) else rho
        sd.append((rho + 1) / 2)

        if pred == c:
            top = top_parts(parts, present)
            kept, removed = adapter.logits([fb.keep_only(s, top), fb.delete_parts(s, top)])
            pc.append(float(unique_argmax(kept) == c))
            dc.append(float(unique_argmax(removed) != c))

        S = sufficient_subset(book, c, present, rng)
        controlled = fb.keep_only(s, S)
        cparts, _ = part_importance(adapter.explain(controlled, c), s.masks)
        ranked = sorted(range(len(fb.PARTS)), key=lambda p: (-cparts[p], p))[: len(S)]
        csdc.append(len(set(ranked) & set(S)) / len(S))

        others = [k for k in range(C) if k != c]
        if others:
            b = int(rng.choice(others))
            ch, own_c, own_b = fb.chimera(s, b, book)
            if own_c and own_b:
                pa, _ = part_importance(adapter.explain(ch, c), ch.masks)
                pb, _ = part_importance(adapter.explain(ch, b), ch.masks)
                ok_a = pa[own_c].mean() > pa[own_b].mean()
                ok_b = pb[own_b].mean() > pb[own_c].mean()
                ts.append(float(ok_a and ok_b))

        control = replace(s, background=fb.random_background(rng))
        cp, cbg = part_importance(adapter.explain(control, c), control.masks, control.background_mask)
        bi.append(distractability(cp, cbg))

    def m(v):
        return float(np.mean(v)) if v else 0.0

    PC, DC, CSDC, D = m(pc), m(dc), m(csdc), m(d_vals)
    return MetricsReport(
        A=m(acc),
        BI=m(bi),
        CSDC=CSDC,
        PC=PC,
        DC=DC,
        D=D,
        SD=m(sd),
        TS=m(ts),
        completeness=float(np.mean([CSDC, PC, DC, D])),
        correctness=m(sd),
        contrastivity=m(ts),
        n_scenes=len(scenes),
        n_correct=int(sum(acc)),
    )
