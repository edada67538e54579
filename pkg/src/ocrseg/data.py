"""Synthetic segmentation scenes and their on-disk form.

Scenes are flat-colored shapes (rectangles and discs) on a background, with
per-scene color jitter and per-pixel noise, quantized to 8 bits at generation
time so the raw image bytes round-trip exactly through the portable pixmap
files. Features are a fixed seeded linear lift of the colors plus coordinate
channels; models never see raw RGB directly.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .context import FeatureMap
from .errors import DataError
from .supervision import IGNORE_INDEX, LabelMap

# Base colors per class (background first). Classes 2 and 3 are deliberately
# close to each other (and only to each other) so per-pixel evidence leaves
# residual confusion that region-level context can resolve.
PALETTE = np.array([
    (120, 120, 120),
    (204, 72, 64),
    (70, 158, 92),
    (100, 184, 66),
    (64, 96, 180),
    (190, 170, 60),
    (150, 70, 160),
    (230, 220, 210),
], dtype=np.float64)

COORD_CHANNELS = 2


@dataclass
class SyntheticScene:
    """One scene: 8-bit RGB image (H, W, 3) and integer labels (H, W)."""

    image: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DataError(f"image must be (H, W, 3), got {self.image.shape}")
        if self.image.dtype != np.uint8 or self.labels.dtype != np.uint8:
            raise DataError("image and labels must be uint8")
        if self.labels.shape != self.image.shape[:2]:
            raise DataError(
                f"labels {self.labels.shape} do not match image {self.image.shape}")

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


def generate_scene(rng: np.random.Generator, grid: int, num_classes: int,
                   noise: float = 30.0, jitter: float = 8.0,
                   shapes_min: int = 2, shapes_max: int = 4,
                   ignore_fraction: float = 0.0) -> SyntheticScene:
    """Place shapes_min..shapes_max random shapes; overlaps belong to the
    later shape. ``noise`` and ``jitter`` are 8-bit color units."""
    if num_classes < 2 or num_classes > PALETTE.shape[0]:
        raise DataError(f"num_classes must be in [2, {PALETTE.shape[0]}], "
                        f"got {num_classes}")
    if grid < 8:
        raise DataError(f"grid must be >= 8, got {grid}")
    labels = np.zeros((grid, grid), dtype=np.uint8)
    scene_colors = PALETTE[:num_classes] + rng.normal(0.0, jitter, (num_classes, 3))
    count = int(rng.integers(shapes_min, shapes_max + 1))
    yy, xx = np.mgrid[0:grid, 0:grid]
    for _ in range(count):
        cls = int(rng.integers(1, num_classes))
        kind = int(rng.integers(0, 2))
        size = int(rng.integers(max(4, grid // 5), max(6, grid // 2)))
        cy = int(rng.integers(0, grid))
        cx = int(rng.integers(0, grid))
        if kind == 0:  # rectangle
            mask = (np.abs(yy - cy) <= size // 2) & (np.abs(xx - cx) <= size // 2)
        else:  # disc
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= (size // 2) ** 2
        labels[mask] = cls
    image = scene_colors[labels] + rng.normal(0.0, noise, (grid, grid, 3))
    image = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    labels = labels.astype(np.uint8)
    if ignore_fraction > 0.0:
        drop = rng.random((grid, grid)) < ignore_fraction
        labels[drop] = 255
    return SyntheticScene(image, labels)


def generate_scenes(seed: int, count: int, grid: int, num_classes: int,
                    noise: float = 30.0, jitter: float = 8.0,
                    shapes_min: int = 2, shapes_max: int = 4,
                    ignore_fraction: float = 0.0,
                    stream: int = 0) -> list[SyntheticScene]:
    rng = np.random.default_rng(np.random.SeedSequence((seed, stream)))
    return [generate_scene(rng, grid, num_classes, noise, jitter,
                           shapes_min, shapes_max, ignore_fraction)
            for _ in range(count)]


# ---------------------------------------------------------------------------
# portable pixmap / graymap I/O


def write_ppm(path: str, image: np.ndarray) -> None:
    """Binary P6, maxval 255."""
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise DataError(f"P6 writer needs (H, W, 3) uint8, got "
                        f"{image.shape} {image.dtype}")
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def write_pgm(path: str, labels: np.ndarray) -> None:
    """Binary P5, maxval 255; 255 is the ignore label."""
    if labels.ndim != 2 or labels.dtype != np.uint8:
        raise DataError(f"P5 writer needs (H, W) uint8, got "
                        f"{labels.shape} {labels.dtype}")
    h, w = labels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(labels.tobytes())


def _read_pnm_header(f) -> tuple[bytes, int, int]:
    magic = f.read(2)
    if magic not in (b"P5", b"P6"):
        raise DataError(f"unsupported magic {magic!r}; expected P5 or P6")
    fields = []
    while len(fields) < 3:
        line = f.readline()
        if not line:
            raise DataError("truncated pixmap header")
        text = line.split(b"#", 1)[0]
        fields.extend(text.split())
    w, h, maxval = (int(v) for v in fields[:3])
    if maxval != 255:
        raise DataError(f"unsupported maxval {maxval}; expected 255")
    return magic, w, h


def read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        magic, w, h = _read_pnm_header(f)
        if magic != b"P6":
            raise DataError(f"{path} is not a P6 pixmap")
        raw = f.read(w * h * 3)
    if len(raw) != w * h * 3:
        raise DataError(f"{path}: expected {w * h * 3} pixel bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).copy()


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        magic, w, h = _read_pnm_header(f)
        if magic != b"P5":
            raise DataError(f"{path} is not a P5 graymap")
        raw = f.read(w * h)
    if len(raw) != w * h:
        raise DataError(f"{path}: expected {w * h} pixel bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).copy()


MANIFEST_NAME = "manifest.txt"


def write_dataset(out_dir: str, train: list[SyntheticScene],
                  eval_scenes: list[SyntheticScene]) -> str:
    """Write scenes as image/label pairs plus a manifest; returns its path.
    Manifest lines: ``<split> <image path> <label path>`` relative to out_dir."""
    lines = []
    for split, scenes in (("train", train), ("eval", eval_scenes)):
        split_dir = os.path.join(out_dir, split)
        os.makedirs(split_dir, exist_ok=True)
        for i, scene in enumerate(scenes):
            img_rel = f"{split}/scene_{i:04d}.ppm"
            lab_rel = f"{split}/scene_{i:04d}.pgm"
            write_ppm(os.path.join(out_dir, img_rel), scene.image)
            write_pgm(os.path.join(out_dir, lab_rel), scene.labels)
            lines.append(f"{split} {img_rel} {lab_rel}")
    manifest = os.path.join(out_dir, MANIFEST_NAME)
    with open(manifest, "w", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
    return manifest


def load_dataset(data_dir: str) -> dict[str, list[SyntheticScene]]:
    manifest = os.path.join(data_dir, MANIFEST_NAME)
    if not os.path.exists(manifest):
        raise DataError(f"no manifest at {manifest}")
    out: dict[str, list[SyntheticScene]] = {"train": [], "eval": []}
    with open(manifest) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise DataError(f"{manifest}:{lineno}: expected 3 fields, "
                                f"got {len(parts)}")
            split, img_rel, lab_rel = parts
            if split not in out:
                raise DataError(f"{manifest}:{lineno}: unknown split {split!r}")
            image = read_ppm(os.path.join(data_dir, img_rel))
            labels = read_pgm(os.path.join(data_dir, lab_rel))
            out[split].append(SyntheticScene(image, labels))
    if not out["train"] and not out["eval"]:
        raise DataError(f"{manifest} lists no scenes")
    return out


# ---------------------------------------------------------------------------
# feature lift


def lift_weights(seed: int, feat_channels: int) -> np.ndarray:
    """The fixed random color lift (feat_channels x 3), derived from the run
    seed so training and evaluation agree without persisting it."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x11F7)))
    return rng.uniform(-1.0, 1.0, size=(feat_channels, 3))


def scene_features(scene: SyntheticScene, lift: np.ndarray) -> FeatureMap:
    """Lifted colors plus two coordinate channels in [0, 1]."""
    h, w = scene.height, scene.width
    colors = scene.image.reshape(-1, 3).T.astype(np.float64) / 255.0 - 0.5
    lifted = lift @ colors  # (C_feat, N)
    ys = np.repeat(np.linspace(0.0, 1.0, h), w)[None, :]
    xs = np.tile(np.linspace(0.0, 1.0, w), h)[None, :]
    feats = np.concatenate([lifted, ys, xs], axis=0)
    c = feats.shape[0]
    return FeatureMap(T.Tensor(feats.reshape(c, h, w)))


def scene_label_map(scene: SyntheticScene, num_classes: int) -> LabelMap:
    return LabelMap(scene.labels.astype(np.int64), num_classes, IGNORE_INDEX)
