"""Minimal dense tensors with reverse-mode differentiation.

Every op records its parents and a backward closure on the output tensor;
``Tensor.backward`` walks the graph in reverse topological order so each node
is visited exactly once. Elementwise ops require identical shapes or a Python
scalar operand; anything else must go through an explicit ``expand``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DTYPE = np.float32

_grad_enabled = True


class DimensionError(ValueError):
    """Raised when operand shapes do not conform."""


class ContractError(RuntimeError):
    """Raised when an operation is called outside its contract."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DTYPE
        self.data = np.asarray(arr, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar()

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph ----------------------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise DimensionError(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.astype(self.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Populate ``.grad`` on every leaf that requires it.

        Without an explicit seed the output must be a scalar.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node._accumulate(g)
                continue
            for parent, pg in node._backward(g):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators ------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_not_scalar():
    raise ContractError("item() requires a single-element tensor")


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data, dtype=data.dtype if data.dtype in (np.float32, np.float64) else DTYPE)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (use expand)")


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.integer, np.floating))


# -- elementwise ------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return _make(a.data + a.dtype.type(b), (a,), lambda g: ((a, g),))
    b = as_tensor(b)
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: ((a, g), (b, g)))


def sub(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return add(a, -b)
    b = as_tensor(b)
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: ((a, g), (b, -g)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: ((a, -g),))


def mul(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        s = a.dtype.type(b)
        return _make(a.data * s, (a,), lambda g: ((a, g * s),))
    b = as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: ((a, g * bd), (b, g * ad)))


def div(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return mul(a, 1.0 / float(b))
    b = as_tensor(b)
    _check_same(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        gb = g / bd
        return (a, gb), (b, -gb * out)

    return _make(out, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: ((x, g * mask),))


def sqrt(x: Tensor) -> Tensor:
    """Elementwise square root; gradient at exactly zero is defined as zero."""
    out = np.sqrt(x.data)

    def backward(g):
        safe = np.where(out > 0, out, 1)
        return ((x, np.where(out > 0, g / (2 * safe), 0).astype(x.dtype)),)

    return _make(out, (x,), backward)


def clamp_min(x: Tensor, lo: float) -> Tensor:
    mask = x.data >= lo
    out = np.where(mask, x.data, x.dtype.type(lo)).astype(x.dtype)
    return _make(out, (x,), lambda g: ((x, g * mask),))


def abs_pow(x: Tensor, p: float) -> Tensor:
    """|x|**p. The derivative p|x|^(p-1)sgn(x) is taken as zero at x == 0."""
    ax = np.abs(x.data)
    out = ax ** x.dtype.type(p)

    def backward(g):
        nz = ax > 0
        safe = np.where(nz, ax, 1)
        d = np.where(nz, p * safe ** (p - 1) * np.sign(x.data), 0)
        return ((x, (g * d).astype(x.dtype)),)

    return _make(out.astype(x.dtype), (x,), backward)


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x) in the overflow-safe form max(x,0) + log1p(e^-|x|)."""
    d = x.data
    out = np.maximum(d, 0) + np.log1p(np.exp(-np.abs(d)))

    def backward(g):
        sig = np.where(d >= 0, 1 / (1 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1 + np.exp(-np.abs(d))))
        return ((x, (g * sig).astype(x.dtype)),)

    return _make(out.astype(x.dtype), (x,), backward)


# -- shape ops ----------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: ((x, g.reshape(src)),))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError("transpose expects a 2-D tensor")
    return _make(x.data.T.copy(), (x,), lambda g: ((x, np.ascontiguousarray(g.T)),))


def expand(x: Tensor, shape) -> Tensor:
    """Explicit broadcast of size-1 axes to ``shape`` (ranks must match)."""
    shape = tuple(shape)
    if x.ndim != len(shape) or any(s != t and s != 1 for s, t in zip(x.shape, shape)):
        raise DimensionError(f"cannot expand {x.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(x.shape, shape)) if s == 1 and t != 1)
    out = np.broadcast_to(x.data, shape).copy()
    return _make(out, (x,), lambda g: ((x, g.sum(axis=axes, keepdims=True)),))


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return ((x, full),)

    return _make(np.array(out, dtype=x.dtype), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            (t, np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)) for i, t in enumerate(tensors)
        )

    return _make(out, tensors, backward)


# -- reductions --------------------------------------------------------------


def tsum(x: Tensor, axis=None) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=False)
    src = x.shape

    def backward(g):
        if axis is None:
            return ((x, np.full(src, g, dtype=x.dtype)),)
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        return ((x, np.broadcast_to(np.expand_dims(g, ax), src).copy()),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    if axis is None:
        n = x.size
    else:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in ax]))
    return mul(tsum(x, axis), 1.0 / n)


def l2_norm(x: Tensor) -> Tensor:
    """Euclidean norm of all entries; the gradient at the zero vector is zero."""
    return sqrt(tsum(mul(x, x)))


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return (a, g @ bd.T), (b, ad.T @ g)

    return _make(ad @ bd, (a, b), backward)


def _windows(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """View of shape [N, C, k, k, oh, ow] over a padded batch."""
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, shape=(n, c, k, k, oh, ow), strides=(sn, sc, sh, sw, sh * stride, sw * stride), writeable=False
    )


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` ([C,H,W] or [N,C,H,W]) with ``kernels`` [O,C,k,k]."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    single = x.ndim == 3
    if single:
        out = conv2d(reshape(x, (1,) + x.shape), kernels, stride, padding)
        return reshape(out, out.shape[1:])
    if x.ndim != 4 or kernels.ndim != 4:
        raise DimensionError(f"conv2d: expected [N,C,H,W] and [O,C,k,k], got {x.shape}, {kernels.shape}")
    n, c, h, w = x.shape
    o, kc, k, k2 = kernels.shape
    if kc != c or k != k2:
        raise DimensionError(f"conv2d: kernel {kernels.shape} does not match {c} input channels")
    if stride < 1:
        raise DimensionError("conv2d: stride must be >= 1")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise DimensionError(f"conv2d: kernel size {k} exceeds padded input {h + 2 * padding}x{w + 2 * padding}")
    oh, ow = conv_output_size(h, k, stride, padding), conv_output_size(w, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _windows(np.ascontiguousarray(xp), k, stride, oh, ow).reshape(n, c * k * k, oh * ow)
    wm = kernels.data.reshape(o, c * k * k)
    out = np.matmul(wm, cols).reshape(n, o, oh, ow)

    def backward(g):
        g2 = g.reshape(n, o, oh * ow)
        gw = np.einsum("nop,nkp->ok", g2, cols, optimize=True).reshape(kernels.shape) if kernels.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wm.T, g2).reshape(n, c, k, k, oh, ow)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return (x, gx), (kernels, gw)

    return _make(out.astype(x.dtype), (x, kernels), backward)


def parameters_grad_finite(params: Iterable[Tensor]) -> bool:
    return all(p.grad is None or np.all(np.isfinite(p.grad)) for p in params)
