"""Shared oracles for the test suite."""

import numpy as np

from sic.bcos import BCosConv2d, BCosLinear, BCosNetwork, GlobalAvgPool
from sic.head import HeadConfig, SICModel, SupportEntry, SupportSet


def numeric_grad(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central finite differences of scalar ``f`` at float64 ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f(x)
        x[idx] = old - h
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor: float = 1e-6) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), floor))


def small_conv_net(rng, channels=(4, 5), size=6, in_ch=6, B=2.0, latent=7) -> BCosNetwork:
    layers, prev = [], in_ch
    for ch in channels:
        layers.append(BCosConv2d.init(rng, prev, ch, 3, B=B, stride=1, padding=1))
        prev = ch
    layers += [GlobalAvgPool(), BCosLinear.init(rng, prev, latent, B=B)]
    return BCosNetwork(layers, (in_ch, size, size))


def small_dense_net(rng, dims=(5, 4, 3), B=2.0) -> BCosNetwork:
    layers = [BCosLinear.init(rng, a, b, B=B) for a, b in zip(dims[:-1], dims[1:])]
    return BCosNetwork(layers, (dims[0],))


def random_model(seed=0, C=3, n_s=2, T=5.0, bias=0.0, size=6) -> SICModel:
    """Small untrained model whose supports are real evidence vectors of random images."""
    rng = np.random.default_rng(seed)
    net = small_conv_net(rng, size=size, latent=8)
    entries = []
    for c in range(C):
        for i in range(n_s):
            img = rng.uniform(size=(6, size, size)).astype(np.float32)
            v = np.maximum(net.embed(img[None])[0], 0)
            if not v.any():
                v = np.abs(rng.normal(size=8)).astype(np.float32)
            entries.append(SupportEntry(v, 10 * c + i, c, img))
    return SICModel(net, HeadConfig(C, temperature=T, bias=bias, n_support=n_s), SupportSet(entries))
