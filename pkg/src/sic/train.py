"""Optimization loop: per-batch random supports, BCE, Adam, post-epoch k-means supports."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .bcos import BCosNetwork, ValidationError
from .head import (
    DatasetError,
    HeadConfig,
    SICModel,
    SupportSet,
    _per_class_pool,
    class_scores,
    evidence,
    extract_supports,
    sample_support_indices,
)
from .tensor import ContractError, Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Optimization cannot continue (e.g. non-finite gradients)."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 50
    batch_size: int = 8
    warmup_epochs: int = 2
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    temperature: float = 30.0
    n_support: int = 3
    B: float = 2.0
    bias: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        for name in ("learning_rate", "epochs", "batch_size", "temperature", "n_support", "B"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.warmup_epochs < 0 or self.weight_decay < 0 or self.eps <= 0:
            raise ValueError("warmup_epochs, weight_decay must be >= 0 and eps > 0")
        if not all(0 <= b < 1 for b in self.betas):
            raise ValueError("betas must lie in [0, 1)")

    def head_config(self, num_classes: int) -> HeadConfig:
        return HeadConfig(num_classes, self.temperature, self.bias, self.n_support, self.B)


@dataclass
class Dataset:
    """Encoded images [N,6,H,W], multi-hot labels [N,C] and sample ids."""

    images: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    mode: str = "single-label"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.float32)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if not (len(self.images) == len(self.labels) == len(self.ids)):
            raise ValidationError("images, labels and ids must have equal length")
        if self.mode not in ("single-label", "multi-label"):
            raise ValidationError(f"unknown dataset mode {self.mode!r}")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValidationError("labels must be multi-hot 0/1")
        if self.mode == "single-label" and len(self) and not np.all(self.labels.sum(axis=1) == 1):
            raise ValidationError("single-label samples need exactly one positive label")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def num_classes(self) -> int:
        return self.labels.shape[1]

    @property
    def classes(self) -> np.ndarray:
        return self.labels.argmax(axis=1)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.ids[idx], self.mode)


def bce_loss(logits: Tensor, targets) -> Tensor:
    """Mean over entries of softplus(mu) - t*mu, the stable form of sigmoid BCE."""
    targets = np.asarray(targets, dtype=logits.dtype)
    if targets.shape != logits.shape:
        raise ValidationError(f"targets shape {targets.shape} != logits shape {logits.shape}")
    if not np.isin(targets, (0, 1)).all():
        raise ValidationError("BCE targets must be 0 or 1")
    per = T.sub(T.softplus(logits), T.mul(logits, Tensor(targets, dtype=logits.dtype)))
    return T.mean(per)


def lr_at(iteration: int, total_iterations: int, cfg: TrainConfig) -> float:
    """Linear warmup from 10% over ``warmup_epochs``, hold, then halve at 60/70/80/90%."""
    lr = cfg.learning_rate
    warm = cfg.warmup_epochs * total_iterations / cfg.epochs
    if iteration < warm:
        return lr * (0.1 + 0.9 * iteration / warm)
    halvings = sum(1 for k in (6, 7, 8, 9) if iteration * 10 >= k * total_iterations)
    return lr * 0.5**halvings


class Adam:
    """Adam with decoupled weight decay (AdamW); weight_decay=0 is plain Adam."""

    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        for p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient in parameter of shape {p.shape} at step {self.t + 1}")
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.weight_decay:
                p.data -= (lr * self.weight_decay * p.data).astype(p.dtype)
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def adam_step(params, grads, state: Optional[dict], lr: float, cfg: TrainConfig) -> tuple:
    """Functional Adam update on numpy arrays; returns (new_params, new_state)."""
    b1, b2 = cfg.betas
    if state is None:
        state = {"t": 0, "m": [np.zeros_like(p) for p in params], "v": [np.zeros_like(p) for p in params]}
    if any(not np.all(np.isfinite(g)) for g in grads):
        raise TrainingError("non-finite gradient")
    t = state["t"] + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        step = lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + cfg.eps)
        new_p.append(p - lr * cfg.weight_decay * p - step)
        new_m.append(m)
        new_v.append(v)
    return new_p, {"t": t, "m": new_m, "v": new_v}


@dataclass
class TrainResult:
    model: SICModel
    supports: SupportSet
    history: list = field(default_factory=list)

    def history_jsonl(self) -> str:
        return "".join(json.dumps(h) + "\n" for h in self.history)


def _eligible_latents(net: BCosNetwork, data: Dataset):
    lat = evidence(net.embed(data.images))
    pools = _per_class_pool(data.labels)
    return (
        {c: lat[idx] for c, idx in pools.items()},
        {c: data.ids[idx] for c, idx in pools.items()},
        {c: data.images[idx] for c, idx in pools.items()},
        lat,
    )


def refresh_supports(net: BCosNetwork, data: Dataset, n_support: int, rng: np.random.Generator) -> tuple:
    """Recompute all training evidence vectors and extract a k-means support set."""
    lat_c, ids_c, img_c, lat = _eligible_latents(net, data)
    return extract_supports(lat_c, n_support, rng, ids=ids_c, images=img_c), lat


def _check_minimums(data: Dataset, n_support: int) -> None:
    for c, idx in _per_class_pool(data.labels).items():
        if len(idx) < n_support:
            raise DatasetError(f"class {c} has {len(idx)} eligible training samples, needs N_s={n_support}")


def train(
    dataset: Dataset,
    net: BCosNetwork,
    train_cfg: TrainConfig,
    head_cfg: Optional[HeadConfig] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Fit ``net`` in place and return the model with its final support set."""
    if len(dataset) == 0:
        raise DatasetError("empty training set")
    head_cfg = head_cfg or train_cfg.head_config(dataset.num_classes)
    _check_minimums(dataset, head_cfg.n_support)
    rng = np.random.default_rng(train_cfg.seed)
    params = net.parameters()
    opt = Adam(params, train_cfg.betas, train_cfg.eps, train_cfg.weight_decay)
    n = len(dataset)
    bs = train_cfg.batch_size
    per_epoch = int(np.ceil(n / bs))
    total = per_epoch * train_cfg.epochs
    it = 0
    history = []
    supports = None
    for epoch in range(train_cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        losses = []
        lr = train_cfg.learning_rate
        for start in range(0, n, bs):
            batch = order[start : start + bs]
            lr = lr_at(it, total, train_cfg)
            picks = sample_support_indices(dataset.labels, head_cfg.n_support, rng, exclude=batch)
            sup_idx = np.concatenate([picks[c] for c in sorted(picks)])
            sup_cls = np.concatenate([[c] * len(picks[c]) for c in sorted(picks)])
            x = np.concatenate([dataset.images[batch], dataset.images[sup_idx]])
            fp = T.relu(net.forward(Tensor(x)))
            nb = len(batch)
            mu = T.add(class_scores(fp[:nb], fp[nb:], sup_cls, head_cfg), head_cfg.bias)
            loss = bce_loss(mu, dataset.labels[batch])
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            losses.append(loss.item())
            it += 1
        supports, lat = refresh_supports(net, dataset, head_cfg.n_support, rng)
        model = SICModel(net, head_cfg, supports)
        acc = _accuracy(_latent_logits(lat, supports, head_cfg), dataset)
        rec = {"epoch": epoch, "mean_loss": float(np.mean(losses)), "accuracy": acc, "lr": float(lr)}
        history.append(rec)
        log.info("epoch %d loss %.4f acc %.3f lr %.2e (%.1fs)", epoch, rec["mean_loss"], acc, lr, time.perf_counter() - t0)
        if on_epoch is not None:
            on_epoch(rec)
    return TrainResult(SICModel(net, head_cfg, supports), supports, history)


def _latent_logits(lat_plus: np.ndarray, supports: SupportSet, cfg: HeadConfig) -> np.ndarray:
    with T.no_grad():
        mu = class_scores(Tensor(lat_plus), Tensor(supports.vectors()), supports.class_ids(), cfg)
    return mu.data + np.float32(cfg.bias)


def _accuracy(mu: np.ndarray, data: Dataset) -> float:
    if data.mode == "single-label":
        return float(np.mean(mu.argmax(axis=1) == data.classes))
    pred = 1 / (1 + np.exp(-mu)) > 0.5
    return float(np.mean(pred == (data.labels > 0.5)))


def evaluate(model: SICModel, dataset: Dataset) -> float:
    """Single-label: argmax accuracy. Multi-label: mean per-class accuracy of sigma(mu) > 0.5."""
    if len(dataset) == 0:
        raise DatasetError("cannot evaluate on an empty dataset")
    if model.supports is None:
        raise ContractError("model has no extracted supports")
    return _accuracy(model.logits(dataset.images), dataset)


def nw_head_probabilities(latents: np.ndarray, support_latents: np.ndarray, support_classes: Sequence[int], num_classes: int) -> np.ndarray:
    """Nadaraya-Watson baseline: softmax over negative squared distances, summed per class."""
    latents = np.asarray(latents, dtype=np.float64)
    sl = np.asarray(support_latents, dtype=np.float64)
    d2 = ((latents[:, None, :] - sl[None]) ** 2).sum(axis=2)
    z = -d2 - (-d2).max(axis=1, keepdims=True)
    w = np.exp(z)
    w /= w.sum(axis=1, keepdims=True)
    out = np.zeros((len(latents), num_classes))
    for k, c in enumerate(support_classes):
        out[:, c] += w[:, k]
    return out


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["betas"] = list(cfg.betas)
    return d
