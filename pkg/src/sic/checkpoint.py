"""Binary model checkpoints.

Layout (little-endian)::

    b"SIC1"  u32 version  u32 n_tensors
    n_tensors x { u16 name_len, name (utf-8), u8 rank, rank x u32 dim, f32 payload }
    u32 json_len, JSON trailer (architecture, head config, support manifest)

Support vectors and their source images are ordinary named tensors; the
trailer records each support's class and source sample id. Config scalars
live in the trailer so that float64 values survive exactly.
"""

from __future__ import annotations

import json
import struct
from typing import BinaryIO, Optional

import numpy as np

from .bcos import BCosConv2d, BCosLinear, BCosNetwork, GlobalAvgPool
from .head import HeadConfig, SICModel, SupportEntry, SupportSet

MAGIC = b"SIC1"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated or incompatible checkpoint file."""


def _layer_spec(i: int, layer) -> tuple:
    if isinstance(layer, BCosConv2d):
        return {"kind": "bcos_conv", "B": layer.B, "stride": layer.stride, "padding": layer.padding}, {f"layer{i}.kernels": layer.kernels.data}
    if isinstance(layer, BCosLinear):
        return {"kind": "bcos_linear", "B": layer.B}, {f"layer{i}.weights": layer.weights.data}
    if isinstance(layer, GlobalAvgPool):
        return {"kind": "avg_pool"}, {}
    raise CheckpointError(f"cannot serialise layer type {type(layer).__name__}")


def _build_layer(i: int, spec: dict, tensors: dict):
    kind = spec.get("kind")
    try:
        if kind == "bcos_conv":
            return BCosConv2d(tensors[f"layer{i}.kernels"], spec["B"], spec["stride"], spec["padding"])
        if kind == "bcos_linear":
            return BCosLinear(tensors[f"layer{i}.weights"], spec["B"])
    except KeyError as e:
        raise CheckpointError(f"layer {i} ({kind}) is missing {e}") from None
    if kind == "avg_pool":
        return GlobalAvgPool()
    raise CheckpointError(f"unknown layer kind {kind!r}")


def _write_tensor(fh: BinaryIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    arr = np.asarray(arr)
    if arr.dtype != np.float32:
        raise CheckpointError(f"tensor {name!r} must be float32, got {arr.dtype}")
    if arr.ndim > 255 or len(raw) > 0xFFFF:
        raise CheckpointError(f"tensor {name!r} cannot be encoded")
    fh.write(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(path: str, model: SICModel, extra: Optional[dict] = None) -> None:
    if model.supports is None:
        raise CheckpointError("model has no support set to save")
    tensors, arch = {}, []
    for i, layer in enumerate(model.backbone.layers):
        spec, ts = _layer_spec(i, layer)
        arch.append(spec)
        tensors.update(ts)
    entries = model.supports.entries
    tensors["support.vectors"] = model.supports.vectors()
    has_images = all(e.image is not None for e in entries)
    if has_images:
        tensors["support.images"] = np.stack([np.asarray(e.image, dtype=np.float32) for e in entries])
    cfg = model.cfg
    trailer = {
        "input_shape": list(model.backbone.input_shape),
        "layers": arch,
        "head": {"num_classes": cfg.num_classes, "temperature": cfg.temperature, "bias": cfg.bias, "n_support": cfg.n_support, "B": cfg.B},
        "supports": [{"class": int(e.class_id), "source_id": int(e.source_index)} for e in entries],
        "support_images": has_images,
        "extra": extra or {},
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            _write_tensor(fh, name, arr)
        blob = json.dumps(trailer, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(blob)) + blob)


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path: str) -> tuple:
    """(tensors by name, trailer dict) without building a model."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror}") from None
    r = _Reader(data, path)
    magic = r.take(4)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} is not supported (this build reads version {VERSION})")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        n = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)
    (jlen,) = r.unpack("<I")
    try:
        trailer = json.loads(r.take(jlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt JSON trailer ({e})") from None
    if r.pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - r.pos} trailing bytes after the trailer")
    return tensors, trailer


def load_checkpoint(path: str) -> tuple:
    """Returns (SICModel, trailer extra dict)."""
    tensors, t = read_checkpoint(path)
    try:
        layers = [_build_layer(i, spec, tensors) for i, spec in enumerate(t["layers"])]
        backbone = BCosNetwork(layers, t["input_shape"])
        cfg = HeadConfig(**t["head"])
        vecs = tensors["support.vectors"]
        imgs = tensors.get("support.images") if t.get("support_images") else None
        manifest = t["supports"]
    except KeyError as e:
        raise CheckpointError(f"{path}: missing field {e}") from None
    if len(manifest) != len(vecs):
        raise CheckpointError(f"{path}: {len(manifest)} support records but {len(vecs)} vectors")
    entries = [
        SupportEntry(vecs[k], int(m["source_id"]), int(m["class"]), None if imgs is None else imgs[k])
        for k, m in enumerate(manifest)
    ]
    return SICModel(backbone, cfg, SupportSet(entries)), t.get("extra", {})
