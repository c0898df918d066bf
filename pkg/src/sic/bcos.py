"""B-cos layers, image encoding and input-dependent linear summaries.

A B-cos unit computes ``||x|| |cos(x, w_hat)|^B sgn(cos)``, which equals
``(|cos|^(B-1) w_hat) . x``. Holding the scaling factor fixed for a given
input makes the whole network a product of matrices, so every output is
``W(x) x`` for a matrix that can be built explicitly or read off as a
gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .tensor import ContractError, DimensionError, Tensor

NORM_FLOOR = 1e-12


class ConfigurationError(ValueError):
    """Raised for invalid layer or transform parameters."""


class ValidationError(ValueError):
    """Raised for out-of-range input data."""


def encode_image(rgb) -> np.ndarray:
    """[3,H,W] RGB in [0,1] -> [6,H,W] (R, G, B, 1-R, 1-G, 1-B)."""
    rgb = np.asarray(rgb.data if isinstance(rgb, Tensor) else rgb, dtype=np.float32)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ValidationError(f"expected a [3,H,W] image, got shape {rgb.shape}")
    if not np.all(np.isfinite(rgb)) or rgb.min() < 0 or rgb.max() > 1:
        raise ValidationError("image values must lie in [0, 1]")
    return np.concatenate([rgb, 1 - rgb], axis=0)


def bcos_transform(x, w, B: float = 2.0) -> float:
    """Scalar B-cos response of input ``x`` to weight ``w``."""
    x = np.asarray(x, dtype=np.float64).ravel()
    w = np.asarray(w, dtype=np.float64).ravel()
    wn = np.linalg.norm(w)
    if wn == 0:
        raise ConfigurationError("B-cos weight vector has zero norm")
    xn = np.linalg.norm(x)
    if xn == 0:
        return 0.0
    lin = float(x @ (w / wn))
    cos = lin / xn
    return float(xn * abs(cos) ** B * np.sign(cos))


def _check_exponent(B: float) -> float:
    B = float(B)
    if not np.isfinite(B) or B < 1:
        raise ConfigurationError(f"B-cos exponent must be finite and >= 1, got {B}")
    return B


def _scaled(lin: Tensor, norm: Tensor, B: float, frozen: bool) -> Tensor:
    """lin * |lin / norm|^(B-1), with the scale detached when ``frozen``."""
    if B == 1:
        return lin
    cos = T.div(lin, T.clamp_min(norm, NORM_FLOOR))
    scale = T.abs_pow(cos, B - 1)
    if frozen:
        scale = scale.detach()
    return T.mul(lin, scale)


def _scale_np(lin: np.ndarray, norm: np.ndarray, B: float) -> np.ndarray:
    if B == 1:
        return np.ones_like(lin)
    return np.abs(lin / np.maximum(norm, NORM_FLOOR)) ** (B - 1)


class BCosConv2d:
    """Bias-free B-cos convolution; the norm is taken over each receptive field."""

    kind = "bcos_conv"

    def __init__(self, kernels: np.ndarray, B: float = 2.0, stride: int = 1, padding: int = 0):
        kernels = np.asarray(kernels, dtype=np.float32)
        if kernels.ndim != 4 or kernels.shape[2] != kernels.shape[3]:
            raise ConfigurationError(f"kernels must be [O,C,k,k], got {kernels.shape}")
        if stride < 1 or padding < 0:
            raise ConfigurationError("stride must be >= 1 and padding >= 0")
        self.kernels = Tensor(kernels, requires_grad=True)
        self.B = _check_exponent(B)
        self.stride = int(stride)
        self.padding = int(padding)

    @classmethod
    def init(cls, rng: np.random.Generator, in_ch: int, out_ch: int, k: int = 3, **kw) -> "BCosConv2d":
        fan_in = in_ch * k * k
        return cls(rng.normal(0, np.sqrt(2.0 / fan_in), (out_ch, in_ch, k, k)), **kw)

    def parameters(self) -> list:
        return [self.kernels]

    @property
    def k(self) -> int:
        return self.kernels.shape[2]

    def out_shape(self, in_shape: Sequence[int]) -> tuple:
        c, h, w = in_shape
        if c != self.kernels.shape[1]:
            raise DimensionError(f"layer expects {self.kernels.shape[1]} channels, got {c}")
        return (
            self.kernels.shape[0],
            T.conv_output_size(h, self.k, self.stride, self.padding),
            T.conv_output_size(w, self.k, self.stride, self.padding),
        )

    def unit_weights(self) -> Tensor:
        w = self.kernels
        o = w.shape[0]
        norms = T.sqrt(T.tsum(T.mul(w, w), axis=(1, 2, 3)))
        return T.div(w, T.expand(T.reshape(T.clamp_min(norms, NORM_FLOOR), (o, 1, 1, 1)), w.shape))

    def forward(self, x: Tensor, frozen: bool = False) -> Tensor:
        w_hat = self.unit_weights()
        lin = T.conv2d(x, w_hat, self.stride, self.padding)
        ones = Tensor(np.ones((1,) + self.kernels.shape[1:], dtype=x.dtype))
        norm = T.sqrt(T.conv2d(T.mul(x, x), ones, self.stride, self.padding))
        return _scaled(lin, T.expand(norm, lin.shape), self.B, frozen)

    def summary_matrix(self, a: np.ndarray) -> sp.csr_matrix:
        """Sparse W~(a) of shape [O*H'*W', C*H*W] for one unbatched input."""
        a = np.asarray(a, dtype=np.float64)
        c, h, w = a.shape
        o, _, k, _ = self.kernels.shape
        oh, ow = self.out_shape(a.shape)[1:]
        w_hat = self.kernels.data.astype(np.float64)
        w_hat = w_hat / np.maximum(np.sqrt((w_hat**2).sum(axis=(1, 2, 3), keepdims=True)), NORM_FLOOR)
        ap = np.pad(a, ((0, 0), (self.padding,) * 2, (self.padding,) * 2))
        cols = T._windows(ap[None], k, self.stride, oh, ow).reshape(c * k * k, oh * ow)
        lin = w_hat.reshape(o, -1) @ cols
        norm = np.sqrt((cols**2).sum(axis=0))[None, :]
        scale = _scale_np(lin, norm, self.B)  # [O, P]

        # input coordinates of every (output position, c, i, j) tap
        py, px = np.divmod(np.arange(oh * ow), ow)
        cc, ii, jj = np.meshgrid(np.arange(c), np.arange(k), np.arange(k), indexing="ij")
        cc, ii, jj = cc.ravel(), ii.ravel(), jj.ravel()
        iy = py[:, None] * self.stride + ii[None, :] - self.padding
        ix = px[:, None] * self.stride + jj[None, :] - self.padding
        valid = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
        col_idx = cc[None, :] * h * w + iy * w + ix  # [P, C*k*k]

        vals = scale[:, :, None] * w_hat.reshape(o, 1, -1)  # [O, P, C*k*k]
        rows = np.arange(o * oh * ow).reshape(o, oh * ow, 1)
        mask = np.broadcast_to(valid[None], vals.shape)
        m = sp.coo_matrix(
            (vals[mask], (np.broadcast_to(rows, vals.shape)[mask], np.broadcast_to(col_idx[None], vals.shape)[mask])),
            shape=(o * oh * ow, c * h * w),
        )
        return m.tocsr()


class BCosLinear:
    """Bias-free B-cos dense layer."""

    kind = "bcos_linear"

    def __init__(self, weights: np.ndarray, B: float = 2.0):
        weights = np.asarray(weights, dtype=np.float32)
        if weights.ndim != 2:
            raise ConfigurationError(f"weights must be [out,in], got {weights.shape}")
        self.weights = Tensor(weights, requires_grad=True)
        self.B = _check_exponent(B)

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, n_out: int, **kw) -> "BCosLinear":
        return cls(rng.normal(0, np.sqrt(2.0 / n_in), (n_out, n_in)), **kw)

    def parameters(self) -> list:
        return [self.weights]

    def out_shape(self, in_shape: Sequence[int]) -> tuple:
        n_in = int(np.prod(in_shape))
        if n_in != self.weights.shape[1]:
            raise DimensionError(f"layer expects {self.weights.shape[1]} inputs, got {n_in}")
        return (self.weights.shape[0],)

    def unit_weights(self) -> Tensor:
        w = self.weights
        norms = T.sqrt(T.tsum(T.mul(w, w), axis=1))
        return T.div(w, T.expand(T.reshape(T.clamp_min(norms, NORM_FLOOR), (w.shape[0], 1)), w.shape))

    def forward(self, x: Tensor, frozen: bool = False) -> Tensor:
        if x.ndim != 2:
            x = T.reshape(x, (x.shape[0], -1))
        lin = T.matmul(x, T.transpose(self.unit_weights()))
        norm = T.sqrt(T.tsum(T.mul(x, x), axis=1))
        norm = T.expand(T.reshape(norm, (x.shape[0], 1)), lin.shape)
        return _scaled(lin, norm, self.B, frozen)

    def summary_matrix(self, a: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=np.float64).ravel()
        w = self.weights.data.astype(np.float64)
        w_hat = w / np.maximum(np.linalg.norm(w, axis=1, keepdims=True), NORM_FLOOR)
        lin = w_hat @ a
        scale = _scale_np(lin, np.linalg.norm(a), self.B)
        return scale[:, None] * w_hat


class GlobalAvgPool:
    """Mean over the spatial axes; exactly linear, so its summary is fixed."""

    kind = "avg_pool"

    def parameters(self) -> list:
        return []

    def out_shape(self, in_shape: Sequence[int]) -> tuple:
        return (in_shape[0],)

    def forward(self, x: Tensor, frozen: bool = False) -> Tensor:
        return T.mean(x, axis=(2, 3))

    def summary_matrix(self, a: np.ndarray) -> sp.csr_matrix:
        c, h, w = a.shape
        hw = h * w
        rows = np.repeat(np.arange(c), hw)
        return sp.csr_matrix((np.full(c * hw, 1.0 / hw), (rows, np.arange(c * hw))), shape=(c, c * hw))


class BCosNetwork:
    """Ordered stack of summarizable layers operating on batches."""

    def __init__(self, layers: Sequence, input_shape: Sequence[int]):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        shape = self.input_shape
        self.shapes = [shape]
        for layer in self.layers:
            shape = layer.out_shape(shape)
            self.shapes.append(tuple(shape))

    @property
    def output_dim(self) -> int:
        return int(np.prod(self.shapes[-1]))

    def parameters(self) -> list:
        return [p for layer in self.layers for p in layer.parameters()]

    def _as_batch(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
        if tuple(x.shape[1:]) == self.input_shape:
            return x
        if tuple(x.shape) == self.input_shape:
            return T.reshape(x, (1,) + x.shape)
        raise DimensionError(f"network expects input {self.input_shape}, got {x.shape}")

    def forward(self, x, frozen: bool = False, upto: Optional[int] = None) -> Tensor:
        """Batched forward through the first ``upto`` layers (all by default)."""
        h = self._as_batch(x)
        n = len(self.layers) if upto is None else upto
        for layer in self.layers[:n]:
            h = layer.forward(h, frozen=frozen)
        return h

    __call__ = forward

    def activations(self, image: np.ndarray) -> list:
        """Per-layer activations (unbatched numpy) for a single input."""
        acts = [np.asarray(image, dtype=np.float32).reshape(self.input_shape)]
        with T.no_grad():
            h = self._as_batch(acts[0])
            for layer in self.layers:
                h = layer.forward(h)
                acts.append(h.data[0])
        return acts

    def embed(self, images: np.ndarray, upto: Optional[int] = None) -> np.ndarray:
        """Inference-only forward, one input at a time so results do not depend on batching."""
        images = np.asarray(images, dtype=np.float32)
        out = []
        with T.no_grad():
            for img in images:
                out.append(self.forward(img[None], upto=upto).data[0].reshape(-1))
        return np.stack(out) if out else np.zeros((0, self.output_dim), np.float32)


# -- linear summaries ---------------------------------------------------------


@dataclass
class LinearSummary:
    """Input-dependent matrix W(x) with ``W(x) @ x == activations``.

    Either ``matrix`` is set, or rows are produced lazily by ``row_fn``.
    """

    input_shape: tuple
    activations: np.ndarray
    strategy: str
    matrix_: Optional[np.ndarray] = None
    row_fn: Optional[Callable[[Sequence[int]], np.ndarray]] = field(default=None, repr=False)

    @property
    def n_units(self) -> int:
        return self.activations.size

    def _check(self, j: int) -> None:
        if not 0 <= j < self.n_units:
            raise ContractError(f"unit {j} out of range [0, {self.n_units})")

    def rows(self, js: Sequence[int]) -> np.ndarray:
        for j in js:
            self._check(j)
        if self.matrix_ is not None:
            return self.matrix_[list(js)]
        return self.row_fn(list(js))

    def row(self, j: int) -> np.ndarray:
        return self.rows([j])[0]

    def matrix(self) -> np.ndarray:
        if self.matrix_ is None:
            self.matrix_ = self.rows(range(self.n_units))
        return self.matrix_

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.matrix() @ np.asarray(x, dtype=np.float64).ravel()


def _resolve_layer(net: BCosNetwork, layer: Optional[int]) -> int:
    n = len(net.layers)
    if layer is None:
        return n
    if not 1 <= layer <= n:
        raise ContractError(f"layer index {layer} out of range [1, {n}]")
    return layer


def explicit_summary_matrix(net: BCosNetwork, image: np.ndarray, layer: Optional[int] = None) -> np.ndarray:
    """Product of the per-layer matrices W~_l(a_l) ... W~_1(a_1)."""
    upto = _resolve_layer(net, layer)
    acts = net.activations(image)
    w = None
    for j in range(upto):
        m = net.layers[j].summary_matrix(acts[j])
        w = m if w is None else m @ w
    return w.toarray() if sp.issparse(w) else np.asarray(w)


def gradient_rows(net: BCosNetwork, image: np.ndarray, units: Sequence[int], upto: Optional[int] = None) -> np.ndarray:
    """Rows of W(x) as input-gradients of a frozen-scaling forward pass.

    The input is replicated once per requested unit and each copy is seeded
    with its own one-hot output gradient, so one backward pass yields all rows.
    """
    units = list(units)
    img = np.asarray(image).reshape(net.input_shape)
    x = Tensor(np.repeat(img[None], len(units), axis=0), requires_grad=True)
    out = net.forward(x, frozen=True, upto=upto)
    out = T.reshape(out, (len(units), -1))
    seed = np.zeros(out.shape, dtype=out.dtype)
    seed[np.arange(len(units)), units] = 1
    out.backward(seed)
    return x.grad.reshape(len(units), -1)


def extract_summary(net: BCosNetwork, image6: np.ndarray, layer: Optional[int] = None, strategy: str = "gradient") -> LinearSummary:
    """LinearSummary of the network output after ``layer`` layers (1-based; default: all)."""
    upto = _resolve_layer(net, layer)
    image6 = np.asarray(image6, dtype=np.float32).reshape(net.input_shape)
    acts = net.activations(image6)[upto].ravel()
    if strategy == "explicit":
        return LinearSummary(net.input_shape, acts, strategy, matrix_=explicit_summary_matrix(net, image6, upto))
    if strategy == "gradient":
        return LinearSummary(net.input_shape, acts, strategy, row_fn=lambda js: gradient_rows(net, image6, js, upto))
    raise ConfigurationError(f"unknown summary strategy {strategy!r}")


def contribution_map(summary: LinearSummary, image6: np.ndarray, unit: int) -> np.ndarray:
    """Per-pixel, channel-summed contributions of ``unit``: sum_ch (row * x)."""
    row = summary.row(unit).reshape(summary.input_shape)
    image6 = np.asarray(image6).reshape(summary.input_shape)
    return (row * image6).sum(axis=0)


def default_backbone(
    rng: np.random.Generator,
    image_size: int = 32,
    in_channels: int = 6,
    channels: Sequence[int] = (16, 32, 64),
    latent_dim: int = 128,
    B: float = 2.0,
    kernel: int = 3,
    stride: int = 2,
    padding: int = 1,
) -> BCosNetwork:
    """B-cos conv stack -> global average pool -> B-cos projection to ``latent_dim``."""
    layers, prev = [], in_channels
    for ch in channels:
        layers.append(BCosConv2d.init(rng, prev, ch, kernel, B=B, stride=stride, padding=padding))
        prev = ch
    layers.append(GlobalAvgPool())
    layers.append(BCosLinear.init(rng, prev, latent_dim, B=B))
    return BCosNetwork(layers, (in_channels, image_size, image_size))
