"""Semantic voxel scenes: representation, file I/O, toy generation, corruption.

A scene is a dense labeled voxel volume. Label 0 is the "empty/air" class and
also defines occupancy for completion metrics. Scenes are stored on disk in
the SEMC1 container (see `save_scene` for the exact byte layout).
"""

from __future__ import annotations

import colorsys
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import SceneFormatError

# Toy scenes use a fixed 5-class scheme; wider label sets get procedural names.
TOY_CLASS_NAMES = ("empty", "road", "building", "car", "vegetation")
TOY_PALETTE = ((0, 0, 0), (128, 64, 128), (70, 70, 70), (0, 0, 142), (107, 142, 35))

EMPTY, ROAD, BUILDING, CAR, VEGETATION = range(5)

# SemanticKITTI learning map (raw label id -> contiguous train id, 20 classes).
SEMANTICKITTI_LEARNING_MAP = {
    0: 0, 1: 0, 10: 1, 11: 2, 13: 5, 15: 3, 16: 5, 18: 4, 20: 5, 30: 6,
    31: 7, 32: 8, 40: 9, 44: 10, 48: 11, 49: 12, 50: 13, 51: 14, 52: 0,
    60: 9, 70: 15, 71: 16, 72: 17, 80: 18, 81: 19, 99: 0, 252: 1, 253: 7,
    254: 6, 255: 8, 256: 5, 257: 5, 258: 4, 259: 5,
}

SEMANTICKITTI_CLASS_NAMES = (
    "empty", "car", "bicycle", "motorcycle", "truck", "other-vehicle",
    "person", "bicyclist", "motorcyclist", "road", "parking", "sidewalk",
    "other-ground", "building", "fence", "vegetation", "trunk", "terrain",
    "pole", "traffic-sign",
)

SEMANTICKITTI_PALETTE = (
    (0, 0, 0), (245, 150, 100), (245, 230, 100), (150, 60, 30),
    (180, 30, 80), (255, 0, 0), (30, 30, 255), (200, 40, 255),
    (90, 30, 150), (255, 0, 255), (255, 150, 255), (75, 0, 75),
    (75, 0, 175), (0, 200, 255), (50, 120, 255), (0, 175, 0),
    (0, 60, 135), (80, 240, 150), (150, 240, 255), (0, 0, 255),
)

SEMANTICKITTI_DIMS = (256, 256, 32)

_MAGIC = b"SEMC1"


def default_class_meta(n_classes: int) -> tuple[tuple[str, ...], np.ndarray]:
    """Class names and an RGB palette for `n_classes` labels.

    The first five classes use the toy scheme; extra classes get stable
    procedural colors so palettes never depend on call order.
    """
    names = list(TOY_CLASS_NAMES[:n_classes])
    colors = [tuple(c) for c in TOY_PALETTE[:n_classes]]
    for i in range(len(names), n_classes):
        names.append(f"class_{i}")
        hue = (i * 0.61803398875) % 1.0
        r, g, b = colorsys.hsv_to_rgb(hue, 0.65, 0.9)
        colors.append((int(r * 255), int(g * 255), int(b * 255)))
    return tuple(names), np.array(colors, dtype=np.uint8)


@dataclass(eq=False)
class SemanticGrid:
    """Dense labeled voxel volume of shape (X, Y, Z), labels in [0, n_classes)."""

    labels: np.ndarray
    n_classes: int
    voxel_size: float = 1.0
    class_names: tuple[str, ...] = ()
    palette: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.uint8))

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint16)
        if self.labels.ndim != 3 or min(self.labels.shape) < 1:
            raise ValueError(f"labels must be a non-empty 3D array, got shape {self.labels.shape}")
        if self.n_classes < 2:
            raise ValueError("need at least an empty class and one occupied class")
        if self.labels.size and self.labels.max() >= self.n_classes:
            raise ValueError(
                f"label {int(self.labels.max())} out of range for n_classes={self.n_classes}"
            )
        if len(self.class_names) == 0:
            self.class_names, default_palette = default_class_meta(self.n_classes)
            if len(self.palette) == 0:
                self.palette = default_palette
        if len(self.class_names) != self.n_classes or len(self.palette) != self.n_classes:
            raise ValueError("class_names and palette must have one entry per class")
        self.palette = np.asarray(self.palette, dtype=np.uint8).reshape(self.n_classes, 3)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)

    def occupancy(self) -> np.ndarray:
        return self.labels != 0

    def empty_fraction(self) -> float:
        return float(np.mean(self.labels == 0))

    def copy_with(self, labels: np.ndarray) -> "SemanticGrid":
        return SemanticGrid(
            labels=labels,
            n_classes=self.n_classes,
            voxel_size=self.voxel_size,
            class_names=self.class_names,
            palette=self.palette.copy(),
        )

    def same_as(self, other: "SemanticGrid") -> bool:
        return (
            self.dims == other.dims
            and self.n_classes == other.n_classes
            and np.array_equal(self.labels, other.labels)
        )


def generate_toy_scene(seed: int, dims: tuple[int, int, int] = (32, 32, 8),
                       n_classes: int = 5) -> SemanticGrid:
    """Procedural desk-scale outdoor scene: ground/road slab, road strips,
    buildings, cars on roads, vegetation columns.

    Deterministic per seed; at least half of the voxels stay empty.
    """
    X, Y, Z = dims
    if X < 16 or Y < 16 or Z < 4:
        raise ValueError(f"dims must be at least (16, 16, 4), got {dims}")
    if n_classes < 5:
        raise ValueError(f"need n_classes >= 5, got {n_classes}")

    rng = np.random.default_rng(seed)
    labels = np.zeros(dims, dtype=np.uint16)

    # Connected ground layer at z=0, with raised road strips at z=1. Counts
    # and sizes vary widely so scenes differ in class make-up, like real
    # outdoor frames do.
    labels[:, :, 0] = ROAD
    strip_mask = np.zeros((X, Y), dtype=bool)
    for _ in range(int(rng.integers(1, 4))):
        w = int(rng.integers(2, 5))
        y0 = int(rng.integers(1, Y - w - 1))
        strip_mask[:, y0:y0 + w] = True
    for _ in range(int(rng.integers(1, 4))):
        w = int(rng.integers(2, 5))
        x0 = int(rng.integers(1, X - w - 1))
        strip_mask[x0:x0 + w, :] = True
    labels[:, :, 1][strip_mask] = ROAD

    # Everything beyond the slab + strips works against an occupancy budget so
    # the >= 50% empty guarantee holds for any admissible dims.
    total = X * Y * Z
    budget = int(0.48 * total) - int(np.count_nonzero(labels))

    def place(block_volume: int) -> bool:
        nonlocal budget
        if block_volume > budget:
            return False
        budget -= block_volume
        return True

    def footprint_fits(mask2d: np.ndarray, w: int, d: int) -> np.ndarray:
        """Anchors (x0, y0) whose w x d footprint lies entirely inside mask2d."""
        ok = np.ones((X - w + 1, Y - d + 1), dtype=bool)
        for dx in range(w):
            for dy in range(d):
                ok &= mask2d[dx:dx + X - w + 1, dy:dy + Y - d + 1]
        return ok

    # Axis-aligned building blocks off the road strips, footing at z=1.
    target_buildings = int(rng.integers(2, 9))
    placed_buildings = 0
    for _ in range(40):
        if placed_buildings >= target_buildings:
            break
        w = int(rng.integers(3, min(10, X // 2)))
        d = int(rng.integers(3, min(10, Y // 2)))
        h = int(rng.integers(2, max(4, min(8, Z))))
        x0 = int(rng.integers(0, X - w))
        y0 = int(rng.integers(0, Y - d))
        if strip_mask[x0:x0 + w, y0:y0 + d].any():
            continue
        if (labels[x0:x0 + w, y0:y0 + d, 1] != 0).any():
            continue
        if not place(w * d * (h - 1)):
            break
        labels[x0:x0 + w, y0:y0 + d, 1:h] = BUILDING
        placed_buildings += 1

    # Car-sized boxes sitting on the road strips (at least one when it fits).
    target_cars = int(rng.integers(1, 7))
    placed_cars = 0
    for _ in range(40):
        if placed_cars >= target_cars:
            break
        along_x = bool(rng.integers(0, 2))
        w, d = (3, 2) if along_x else (2, 3)
        free = footprint_fits(strip_mask & (labels[:, :, 2] == 0), w, d)
        anchors = np.argwhere(free)
        if anchors.size == 0:
            continue
        x0, y0 = anchors[int(rng.integers(0, len(anchors)))]
        if not place(w * d):
            break
        labels[x0:x0 + w, y0:y0 + d, 2] = CAR
        placed_cars += 1

    # Scattered vegetation columns (2x2 footprint) on open ground.
    target_veg = int(rng.integers(2, 15))
    placed_veg = 0
    for _ in range(50):
        if placed_veg >= target_veg:
            break
        x0 = int(rng.integers(0, X - 1))
        y0 = int(rng.integers(0, Y - 1))
        h = int(rng.integers(2, max(3, min(7, Z))))
        if strip_mask[x0:x0 + 2, y0:y0 + 2].any() or (labels[x0:x0 + 2, y0:y0 + 2, 1] != 0).any():
            continue
        if not place(4 * (h - 1)):
            break
        labels[x0:x0 + 2, y0:y0 + 2, 1:h] = VEGETATION
        placed_veg += 1

    grid = SemanticGrid(labels=labels, n_classes=n_classes, voxel_size=0.2)
    assert grid.empty_fraction() >= 0.5
    return grid


def _encode_rle(flat: np.ndarray) -> bytes:
    boundaries = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [flat.size]))
    counts = (ends - starts).astype("<u4")
    values = flat[starts].astype("<u2")
    out = np.empty(counts.size, dtype=[("count", "<u4"), ("label", "<u2")])
    out["count"] = counts
    out["label"] = values
    return out.tobytes()


def save_scene(grid: SemanticGrid, path) -> None:
    """Write a scene as SEMC1.

    Layout (all little-endian):
      magic  b"SEMC1"
      header X, Y, Z, N as u32
      palette block: voxel_size as f32, then N records of
                     [name_len u8][name utf-8][r u8][g u8][b u8]
      payload: run-length pairs (count u32, label u16), x-fastest ordering
    """
    X, Y, Z = grid.dims
    parts = [_MAGIC, struct.pack("<4I", X, Y, Z, grid.n_classes),
             struct.pack("<f", grid.voxel_size)]
    for name, rgb in zip(grid.class_names, grid.palette):
        encoded = name.encode("utf-8")
        if len(encoded) > 255:
            raise ValueError(f"class name too long: {name!r}")
        parts.append(struct.pack("<B", len(encoded)) + encoded + bytes(rgb.tolist()))
    flat = grid.labels.ravel(order="F")  # x varies fastest
    parts.append(_encode_rle(flat))
    Path(path).write_bytes(b"".join(parts))


def load_scene(path) -> SemanticGrid:
    """Read a SEMC1 scene; inverse of `save_scene`, bit-exact round trip."""
    data = Path(path).read_bytes()
    if data[:5] != _MAGIC:
        raise SceneFormatError(f"bad magic {data[:5]!r}, expected {_MAGIC!r}", offset=0)
    pos = 5
    if len(data) < pos + 20:
        raise SceneFormatError("truncated header", offset=len(data))
    X, Y, Z, n_classes = struct.unpack_from("<4I", data, pos)
    pos += 16
    (voxel_size,) = struct.unpack_from("<f", data, pos)
    pos += 4
    if min(X, Y, Z) < 1 or n_classes < 2:
        raise SceneFormatError(f"invalid header dims ({X},{Y},{Z}) N={n_classes}", offset=5)

    names, colors = [], []
    for _ in range(n_classes):
        if pos >= len(data):
            raise SceneFormatError("truncated palette block", offset=pos)
        (name_len,) = struct.unpack_from("<B", data, pos)
        if pos + 1 + name_len + 3 > len(data):
            raise SceneFormatError("truncated palette record", offset=pos)
        names.append(data[pos + 1:pos + 1 + name_len].decode("utf-8"))
        rgb = data[pos + 1 + name_len:pos + 4 + name_len]
        colors.append(tuple(rgb))
        pos += 4 + name_len

    expected = X * Y * Z
    payload = data[pos:]
    if len(payload) % 6 != 0:
        raise SceneFormatError("RLE payload is not a whole number of (count,label) pairs",
                               offset=pos + len(payload) - len(payload) % 6)
    runs = np.frombuffer(payload, dtype=[("count", "<u4"), ("label", "<u2")])
    counts = runs["count"].astype(np.int64)
    labels = runs["label"]
    bad = np.flatnonzero(labels >= n_classes)
    if bad.size:
        raise SceneFormatError(
            f"label {int(labels[bad[0]])} >= n_classes {n_classes}",
            offset=pos + int(bad[0]) * 6 + 4)
    total = int(counts.sum())
    if total != expected:
        raise SceneFormatError(
            f"RLE payload covers {total} voxels, header says {expected}",
            offset=pos + len(payload))
    flat = np.repeat(labels, counts)
    grid_labels = flat.reshape((X, Y, Z), order="F")
    return SemanticGrid(labels=grid_labels, n_classes=n_classes, voxel_size=voxel_size,
                        class_names=tuple(names), palette=np.array(colors, np.uint8))


def load_semantickitti_voxels(directory) -> SemanticGrid:
    """Load one SemanticKITTI voxel frame (first `.label` file in `directory`).

    Raw dataset label ids are remapped to the contiguous 20-class training set.
    """
    directory = Path(directory)
    label_files = sorted(directory.glob("*.label"))
    if not label_files:
        raise SceneFormatError(f"no .label files in {directory}")
    raw = np.fromfile(label_files[0], dtype=np.uint16)
    expected = int(np.prod(SEMANTICKITTI_DIMS))
    if raw.size != expected:
        raise SceneFormatError(
            f"{label_files[0].name}: {raw.size} voxels, expected {expected}",
            offset=raw.size * 2)
    lut = np.zeros(1 << 16, dtype=np.uint16)
    for raw_id, train_id in SEMANTICKITTI_LEARNING_MAP.items():
        lut[raw_id] = train_id
    labels = lut[raw].reshape(SEMANTICKITTI_DIMS)
    return SemanticGrid(
        labels=labels, n_classes=20, voxel_size=0.2,
        class_names=SEMANTICKITTI_CLASS_NAMES,
        palette=np.array(SEMANTICKITTI_PALETTE, np.uint8))


def corrupt_scene(grid: SemanticGrid, severity: float, seed: int, *,
                  dropout: float = 0.35, flip: float = 0.3,
                  dilate: float = 0.4) -> SemanticGrid:
    """Emulate a degraded scene-completion prediction.

    Three mechanisms, each applied with probability scaled by `severity`:
    label flips to a random other nonzero class, 1-voxel dilation of occupied
    regions, and occupied->empty dropout. `severity=0` is the identity.
    """
    if not 0.0 <= severity <= 1.0:
        raise ValueError(f"severity must be in [0, 1], got {severity}")
    rng = np.random.default_rng(seed)
    labels = grid.labels.copy()
    n = grid.n_classes

    p_flip, p_dilate, p_drop = flip * severity, dilate * severity, dropout * severity

    if p_flip > 0:
        occ = labels != 0
        flips = occ & (rng.random(labels.shape) < p_flip)
        if n > 2:
            r = rng.integers(1, n - 1, size=labels.shape).astype(np.uint16)
            new = r + (r >= labels)  # uniform over nonzero classes != current
            labels[flips] = new[flips]

    if p_dilate > 0:
        occ = labels != 0
        neighbor_label = np.zeros_like(labels)
        has_neighbor = np.zeros(labels.shape, dtype=bool)
        for axis in range(3):
            for shift in (1, -1):
                shifted = np.roll(labels, shift, axis=axis)
                # roll wraps; kill the wrapped slice
                idx = [slice(None)] * 3
                idx[axis] = 0 if shift == 1 else -1
                shifted[tuple(idx)] = 0
                take = (shifted != 0) & ~has_neighbor
                neighbor_label[take] = shifted[take]
                has_neighbor |= shifted != 0
        grow = ~occ & has_neighbor & (rng.random(labels.shape) < p_dilate)
        labels[grow] = neighbor_label[grow]

    if p_drop > 0:
        occ = labels != 0
        drops = occ & (rng.random(labels.shape) < p_drop)
        labels[drops] = 0

    return grid.copy_with(labels)


def render_topdown(grid: SemanticGrid) -> np.ndarray:
    """Top-down RGB view (X, Y, 3): per column the color of the highest
    occupied voxel, palette[0] where the column is empty."""
    occ = grid.labels != 0
    any_occ = occ.any(axis=2)
    top = grid.labels.shape[2] - 1 - np.argmax(occ[:, :, ::-1], axis=2)
    top_label = np.take_along_axis(grid.labels, top[:, :, None], axis=2)[:, :, 0]
    img = grid.palette[top_label]
    img[~any_occ] = grid.palette[0]
    return img


@dataclass
class ClassWeights:
    """Per-class positive weights for the weighted cross-entropy."""

    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 1 or len(self.weights) < 2:
            raise ValueError("weights must be a 1D array with one entry per class")
        if not np.all(np.isfinite(self.weights)) or not np.all(self.weights > 0):
            raise ValueError("weights must be positive and finite")


def compute_class_weights(grids: list[SemanticGrid], n_classes: int) -> ClassWeights:
    """Inverse-log-frequency weights: w_c = 1 / ln(f_c + 1.02)."""
    counts = np.zeros(n_classes, dtype=np.int64)
    total = 0
    for g in grids:
        counts += np.bincount(g.labels.ravel(), minlength=n_classes)[:n_classes]
        total += g.labels.size
    freq = counts / max(total, 1)
    return ClassWeights(weights=1.0 / np.log(freq + 1.02))
