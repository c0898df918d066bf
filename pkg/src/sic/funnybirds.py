"""FunnyBirds-lite: a 32x32 synthetic parts dataset with part interventions.

Each "bird" is five parts (beak, wings, feet, eyes, tail) drawn in fixed,
disjoint regions on a flat background. A class is a tuple of per-part
attribute ids; an attribute fixes the part's shape and colour. Instances
vary by small per-part jitter and by background colour.
"""

from __future__ import annotations

import colorsys
import csv
import itertools
import os
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from .bcos import ConfigurationError, encode_image
from .tensor import ContractError

PARTS = ("beak", "wings", "feet", "eyes", "tail")
N_VALUES = 4
CANVAS = 32
JITTER = 1

# (y0, y1, x0, x1), pairwise disjoint. Four corner parts and one central part,
# spaced so that the backbone's 15-px receptive fields mostly see one part.
REGIONS = {
    "eyes": (0, 11, 0, 11),
    "beak": (0, 11, 21, 32),
    "wings": (11, 21, 11, 21),
    "tail": (21, 32, 0, 11),
    "feet": (21, 32, 21, 32),
}

SHAPES = ("rect", "disk", "tri", "ring")


def _palette(n: int) -> np.ndarray:
    """n saturated hues around the colour wheel, alternating bright and dark.

    Every entry has a channel at 0, so no part colour falls inside the
    [0.3, 0.7] background cube.
    """
    return np.array([colorsys.hsv_to_rgb(i / n, 1.0, 1.0 if i % 2 == 0 else 0.6) for i in range(n)])


# one colour per (part, value): no colour is reused across parts
PALETTE = _palette(len(PARTS) * N_VALUES)


def _codewords() -> np.ndarray:
    """All attribute tuples with digit sum divisible by N_VALUES (min Hamming distance 2)."""
    words = [w for w in itertools.product(range(N_VALUES), repeat=len(PARTS)) if sum(w) % N_VALUES == 0]
    return np.array(words, dtype=np.int64)


CAPACITY = len(_codewords())


def _shared(book: np.ndarray) -> bool:
    for p in range(book.shape[1]):
        _, counts = np.unique(book[:, p], return_counts=True)
        if counts.min() < 2:
            return False
    return True


def codebook(num_classes: int) -> np.ndarray:
    """Deterministic class -> attribute-tuple table.

    Prefers codes where every pair of classes differs in >= 3 parts and every
    used (part, value) is shared by >= 2 classes, so that no single part
    identifies a class on its own. The search is seeded, not user-controlled.
    """
    if not 1 <= num_classes <= CAPACITY:
        raise ConfigurationError(f"num_classes must be in [1, {CAPACITY}] (attribute-tuple capacity), got {num_classes}")
    words = _codewords()
    rng = np.random.default_rng(20240611)
    fallback = None
    for _ in range(400):
        chosen = []
        for i in rng.permutation(len(words)):
            w = words[i]
            if all(np.sum(w != c) >= 3 for c in chosen):
                chosen.append(w)
                if len(chosen) == num_classes:
                    break
        if len(chosen) < num_classes:
            continue
        book = np.array(chosen)
        if num_classes < 2 or _shared(book):
            return book
        fallback = book if fallback is None else fallback
    if fallback is not None:
        return fallback
    return words[rng.permutation(len(words))[:num_classes]]


def part_style(part: str, value: int) -> tuple:
    p = PARTS.index(part)
    shape = SHAPES[(value + p) % len(SHAPES)]
    color = PALETTE[value * len(PARTS) + p]
    return shape, color


def _shape_mask(shape: str, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2, (w - 1) / 2
    ry, rx = h / 2, w / 2
    if shape == "rect":
        return np.ones((h, w), bool)
    r = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
    if shape == "disk":
        return r <= 1.0
    if shape == "ring":
        return (r <= 1.0) & (r >= 0.3)
    if shape == "tri":
        return np.abs(xx - cx) <= (yy + 1) * (w / 2) / h
    raise ConfigurationError(f"unknown shape {shape!r}")


def _quant(x):
    return np.round(np.asarray(x, dtype=np.float64) * 255) / 255


@dataclass(frozen=True)
class SceneInstance:
    """One rendered bird. ``attrs[p]`` is None when part p has been deleted."""

    id: int
    class_id: int
    attrs: tuple
    offsets: tuple  # per part (dy, dx)
    background: tuple  # RGB
    split: str = "train"

    def __post_init__(self):
        if len(self.attrs) != len(PARTS) or len(self.offsets) != len(PARTS):
            raise ContractError("scene needs one attribute and one offset per part")

    @cached_property
    def _rendered(self) -> tuple:
        img = np.empty((3, CANVAS, CANVAS), dtype=np.float64)
        img[:] = np.asarray(self.background, dtype=np.float64)[:, None, None]
        masks = np.zeros((len(PARTS), CANVAS, CANVAS), bool)
        for p, part in enumerate(PARTS):
            value = self.attrs[p]
            if value is None:
                continue
            y0, y1, x0, x1 = REGIONS[part]
            h, w = y1 - y0 - 2 * JITTER, x1 - x0 - 2 * JITTER
            shape, color = part_style(part, value)
            local = _shape_mask(shape, h, w)
            dy, dx = self.offsets[p]
            oy, ox = y0 + JITTER + dy, x0 + JITTER + dx
            masks[p, oy : oy + h, ox : ox + w] = local
            img[:, masks[p]] = color[:, None]
        return _quant(img).astype(np.float32), masks

    @property
    def image(self) -> np.ndarray:
        """[3,H,W] RGB in [0,1], quantised to 8 bits."""
        return self._rendered[0]

    @property
    def masks(self) -> np.ndarray:
        """[5,H,W] boolean part masks (empty for deleted parts)."""
        return self._rendered[1]

    @property
    def background_mask(self) -> np.ndarray:
        return ~self.masks.any(axis=0)

    @property
    def image6(self) -> np.ndarray:
        return encode_image(self.image)

    def present(self) -> list:
        return [p for p, a in enumerate(self.attrs) if a is not None]


def _part_index(part) -> int:
    if isinstance(part, str):
        if part not in PARTS:
            raise ContractError(f"unknown part {part!r}; expected one of {PARTS}")
        return PARTS.index(part)
    if not 0 <= int(part) < len(PARTS):
        raise ContractError(f"part index {part} out of range")
    return int(part)


def intervene(scene: SceneInstance, part, mode: str = "delete", target_class: Optional[int] = None, book: Optional[np.ndarray] = None) -> SceneInstance:
    """Delete a part (pixels become background) or swap it to ``target_class``'s attribute."""
    p = _part_index(part)
    if scene.attrs[p] is None:
        raise ContractError(f"part {PARTS[p]!r} is not present in scene {scene.id}")
    attrs = list(scene.attrs)
    if mode == "delete":
        attrs[p] = None
    elif mode == "swap":
        if target_class is None or book is None:
            raise ContractError("swap needs a target class and the codebook")
        attrs[p] = int(book[target_class][p])
    else:
        raise ContractError(f"unknown intervention mode {mode!r}")
    return replace(scene, attrs=tuple(attrs))


def with_part(scene: SceneInstance, part, value: int) -> SceneInstance:
    """Draw ``part`` with attribute ``value`` at its stored offset."""
    p = _part_index(part)
    attrs = list(scene.attrs)
    attrs[p] = int(value)
    return replace(scene, attrs=tuple(attrs))


def keep_only(scene: SceneInstance, parts: Sequence[int]) -> SceneInstance:
    keep = set(parts)
    return replace(scene, attrs=tuple(a if p in keep else None for p, a in enumerate(scene.attrs)))


def delete_parts(scene: SceneInstance, parts: Sequence[int]) -> SceneInstance:
    drop = set(parts)
    return replace(scene, attrs=tuple(None if p in drop else a for p, a in enumerate(scene.attrs)))


def random_background(rng: np.random.Generator) -> tuple:
    return tuple(float(v) for v in _quant(rng.uniform(0.3, 0.7, size=3)))


def generate(num_classes: int, per_class: int, seed: int = 0, split: str = "train", start_id: int = 0) -> list:
    """``per_class`` scenes for each class, deterministic in ``seed``."""
    book = codebook(num_classes)
    rng = np.random.default_rng(seed)
    scenes = []
    sid = start_id
    for c in range(num_classes):
        for _ in range(per_class):
            offsets = tuple(tuple(int(v) for v in rng.integers(-JITTER, JITTER + 1, size=2)) for _ in PARTS)
            scenes.append(SceneInstance(sid, c, tuple(int(a) for a in book[c]), offsets, random_background(rng), split))
            sid += 1
    return scenes


def generate_split(num_classes: int, n_train: int, n_test: int, seed: int = 0) -> tuple:
    train = generate(num_classes, n_train, seed, "train")
    test = generate(num_classes, n_test, seed + 1_000_003, "test", start_id=len(train))
    return train, test


def to_dataset(scenes: Sequence[SceneInstance], num_classes: int):
    from .train import Dataset

    images = np.stack([s.image6 for s in scenes]) if scenes else np.zeros((0, 6, CANVAS, CANVAS), np.float32)
    labels = np.zeros((len(scenes), num_classes), np.float32)
    labels[np.arange(len(scenes)), [s.class_id for s in scenes]] = 1
    return Dataset(images, labels, np.array([s.id for s in scenes], dtype=np.int64))


def chimera(scene: SceneInstance, other_class: int, book: np.ndarray) -> tuple:
    """Swap half of the parts where the two classes differ to ``other_class``.

    Returns (scene, own_parts, other_parts) with part indices for each class.
    """
    diff = [p for p in scene.present() if book[scene.class_id][p] != book[other_class][p]]
    other = diff[len(diff) // 2 :]
    out = scene
    for p in other:
        out = intervene(out, p, "swap", other_class, book)
    return out, diff[: len(diff) // 2], other


# -- export / import ---------------------------------------------------------

CSV_FIELDS = ["id", "split", "class", "attributes", "offsets", "background"]


def _fmt_attrs(attrs) -> str:
    return "-".join("x" if a is None else str(a) for a in attrs)


def save_scenes(out_dir: str, scenes: Sequence[SceneInstance]) -> None:
    """One RGB PNG and one part-label PNG (0 background, p+1 for part p) per scene, plus labels.csv."""
    from PIL import Image

    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    for s in scenes:
        rgb = np.round(s.image.transpose(1, 2, 0) * 255).astype(np.uint8)
        Image.fromarray(rgb, "RGB").save(os.path.join(out_dir, "images", f"{s.id:05d}.png"))
        label = np.zeros((CANVAS, CANVAS), np.uint8)
        for p in range(len(PARTS)):
            label[s.masks[p]] = p + 1
        Image.fromarray(label, "L").save(os.path.join(out_dir, "masks", f"{s.id:05d}.png"))
    with open(os.path.join(out_dir, "labels.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for s in scenes:
            w.writerow(
                [
                    s.id,
                    s.split,
                    s.class_id,
                    _fmt_attrs(s.attrs),
                    ";".join(f"{dy},{dx}" for dy, dx in s.offsets),
                    ",".join(f"{v:.6f}" for v in s.background),
                ]
            )


def load_scenes(data_dir: str, split: Optional[str] = None, verify: bool = True) -> list:
    """Rebuild scenes from labels.csv; with ``verify`` each re-render is checked against its PNG."""
    from PIL import Image

    path = os.path.join(data_dir, "labels.csv")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no labels.csv in {data_dir}")
    scenes = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if split is not None and row["split"] != split:
                continue
            attrs = tuple(None if a == "x" else int(a) for a in row["attributes"].split("-"))
            offsets = tuple(tuple(int(v) for v in o.split(",")) for o in row["offsets"].split(";"))
            bg = tuple(float(v) for v in row["background"].split(","))
            s = SceneInstance(int(row["id"]), int(row["class"]), attrs, offsets, tuple(float(v) for v in _quant(bg)), row["split"])
            if verify:
                png = os.path.join(data_dir, "images", f"{s.id:05d}.png")
                rgb = np.asarray(Image.open(png).convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255
                if not np.allclose(rgb, s.image, atol=1e-6):
                    raise ValueError(f"{png} does not match its labels.csv parameters")
            scenes.append(s)
    return scenes


def num_classes_in(scenes: Sequence[SceneInstance]) -> int:
    return max(s.class_id for s in scenes) + 1
