"""Synthetic 9-channel scenes and the patch pipeline around them.

Training side: crop each scene to a whole number of patches (top-left anchor),
cut a non-overlapping lattice, shuffle, split 80/20.  Test side: uncropped
scenes are covered by overlapping patches whose predictions are averaged back
onto the full extent.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

N_CHANNELS = 9
REFLECTANCE = slice(0, 6)
BRIGHTNESS = slice(6, 9)

# generator constants; frozen after checking cloud fractions on seeds 0..9
CLOUD_THRESHOLD = 0.5
NOISE_CELL = 16
BUMPS_RANGE = (3, 8)
BUMP_SIGMA_RANGE = (0.08, 0.22)  # fraction of the shorter side
BUMP_AMP_RANGE = (0.45, 1.1)
CLOUD_ALBEDO = 0.85
CLOUD_BT_DROP = 0.45
PIXEL_NOISE = 0.03

DATASET_MAGIC = b"CMDS"
DATASET_VERSION = 1


class PipelineError(ValueError):
    pass


class DatasetFileError(Exception):
    """Base class for dataset file problems."""


class BadMagicError(DatasetFileError):
    pass


class UnsupportedVersionError(DatasetFileError):
    pass


class TruncatedFileError(DatasetFileError):
    pass


@dataclass
class Scene:
    """One multi-channel image (C, H, W) float32 and its clear-sky mask (H, W) uint8."""

    image: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.image.ndim != 3 or self.mask.shape != self.image.shape[1:]:
            raise PipelineError(
                f"image {self.image.shape} and mask {self.mask.shape} do not describe one scene"
            )

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]


@dataclass
class PatchGrid:
    patch: int
    origins: list[tuple[int, int]]
    source_h: int
    source_w: int


@dataclass
class PatchSet:
    images: np.ndarray  # (n, C, P, P) float32
    masks: np.ndarray  # (n, P, P) uint8
    provenance: list[tuple[int, int, int]] = field(default_factory=list)  # (scene id, row, col)

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx: np.ndarray) -> "PatchSet":
        return PatchSet(self.images[idx], self.masks[idx], [self.provenance[i] for i in idx])


@dataclass
class DatasetSplit:
    train: PatchSet
    val: PatchSet
    seed: int


# ---------------------------------------------------------------------------
# scene generation


def _value_noise(rng: np.random.Generator, height: int, width: int, cell: int) -> np.ndarray:
    gh, gw = height // cell + 2, width // cell + 2
    grid = rng.random((gh, gw))
    ys = np.arange(height) / cell
    xs = np.arange(width) / cell
    y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    g00 = grid[np.ix_(y0, x0)]
    g01 = grid[np.ix_(y0, x0 + 1)]
    g10 = grid[np.ix_(y0 + 1, x0)]
    g11 = grid[np.ix_(y0 + 1, x0 + 1)]
    return (g00 * (1 - fx) + g01 * fx) * (1 - fy) + (g10 * (1 - fx) + g11 * fx) * fy


def cloudiness_field(rng: np.random.Generator, height: int, width: int, n_bumps: int) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    field_ = np.zeros((height, width))
    side = min(height, width)
    for _ in range(n_bumps):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        sigma = rng.uniform(*BUMP_SIGMA_RANGE) * side
        amp = rng.uniform(*BUMP_AMP_RANGE)
        field_ += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    return field_


def generate_scene(seed: int, height: int, width: int, n_bumps: int | None = None) -> Scene:
    """Deterministic synthetic scene; mask is 1 (clear-sky) where cloudiness < 0.5.

    Channels 0-5 behave like reflectances (clouds brighten them toward a fixed
    albedo), channels 6-8 like scaled brightness temperatures (clouds are cold).
    """
    if height < 16 or width < 16:
        raise PipelineError(f"scene must be at least 16x16, got {height}x{width}")
    rng = np.random.default_rng(seed)
    if n_bumps is None:
        n_bumps = int(rng.integers(BUMPS_RANGE[0], BUMPS_RANGE[1] + 1))
    cloud = cloudiness_field(rng, height, width, n_bumps)
    mask = (cloud < CLOUD_THRESHOLD).astype(np.uint8)

    opacity = np.clip(cloud, 0.0, 1.0)
    image = np.empty((N_CHANNELS, height, width))
    for c in range(6):
        surface = 0.05 + 0.3 * _value_noise(rng, height, width, NOISE_CELL)
        image[c] = surface + opacity * (CLOUD_ALBEDO - surface)
    for c in range(6, 9):
        surface = 0.6 + 0.25 * _value_noise(rng, height, width, NOISE_CELL)
        image[c] = surface - CLOUD_BT_DROP * opacity
    image += rng.normal(0.0, PIXEL_NOISE, size=image.shape)
    return Scene(image.astype(np.float32), mask)


def scene_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def generate_dataset(n_scenes: int, height: int, width: int, seed: int) -> list[Scene]:
    return [generate_scene(scene_seed(seed, i), height, width) for i in range(n_scenes)]


def split_scenes(scenes: Sequence[Scene], test_fraction: float = 0.1) -> tuple[list[Scene], list[Scene]]:
    """Fixed train/test split of whole scenes: the last ``test_fraction`` (at least one) is test."""
    n_test = max(1, int(round(len(scenes) * test_fraction)))
    if n_test >= len(scenes):
        raise PipelineError(f"need more than {n_test} scenes to hold out {n_test} for testing")
    return list(scenes[:-n_test]), list(scenes[-n_test:])


# ---------------------------------------------------------------------------
# training patches


def crop_to_grid(scene: Scene, patch: int) -> Scene:
    if scene.height < patch or scene.width < patch:
        raise PipelineError(
            f"scene {scene.height}x{scene.width} is smaller than one {patch}x{patch} patch"
        )
    h = scene.height // patch * patch
    w = scene.width // patch * patch
    return Scene(scene.image[:, :h, :w], scene.mask[:h, :w])


def lattice_origins(height: int, width: int, patch: int) -> list[tuple[int, int]]:
    return [(r, c) for r in range(0, height, patch) for c in range(0, width, patch)]


def extract_train_patches(scenes: Sequence[Scene], patch: int) -> PatchSet:
    images, masks, prov = [], [], []
    for sid, scene in enumerate(scenes):
        if scene.height % patch or scene.width % patch:
            raise PipelineError(
                f"scene {sid} is {scene.height}x{scene.width}, not cropped to multiples of {patch}"
            )
        for r, c in lattice_origins(scene.height, scene.width, patch):
            images.append(scene.image[:, r:r + patch, c:c + patch])
            masks.append(scene.mask[r:r + patch, c:c + patch])
            prov.append((sid, r, c))
    if not images:
        return PatchSet(np.zeros((0, N_CHANNELS, patch, patch), np.float32), np.zeros((0, patch, patch), np.uint8))
    return PatchSet(np.stack(images).astype(np.float32), np.stack(masks).astype(np.uint8), prov)


def assemble_lattice(patches: PatchSet, scene_id: int, height: int, width: int) -> Scene:
    """Inverse of the training lattice for one scene."""
    channels = patches.images.shape[1]
    p = patches.images.shape[-1]
    image = np.zeros((channels, height, width), np.float32)
    mask = np.zeros((height, width), np.uint8)
    for k, (sid, r, c) in enumerate(patches.provenance):
        if sid == scene_id:
            image[:, r:r + p, c:c + p] = patches.images[k]
            mask[r:r + p, c:c + p] = patches.masks[k]
    return Scene(image, mask)


def split_train_val(patches: PatchSet, ratio: float = 0.8, seed: int = 0) -> DatasetSplit:
    """Shuffle (Fisher-Yates via ``Generator.permutation``) and put the first
    ceil(ratio * n) patches in train."""
    if not 0 < ratio < 1:
        raise PipelineError(f"split ratio must be in (0, 1), got {ratio}")
    n = len(patches)
    if n == 0:
        raise PipelineError("cannot split an empty patch collection")
    n_train = math.ceil(Fraction(str(ratio)) * n)
    order = np.random.default_rng(seed).permutation(n)
    return DatasetSplit(patches.subset(order[:n_train]), patches.subset(order[n_train:]), seed)


# ---------------------------------------------------------------------------
# test patches and reconstruction


def axis_origins(dim: int, patch: int, stride: int) -> list[int]:
    """Evenly spread origins, first at 0 and last flush with dim - patch.

    The step never exceeds ``patch``, so coverage holds even for stride > patch.
    """
    if stride <= 0:
        raise PipelineError(f"stride must be positive, got {stride}")
    if dim < patch:
        raise PipelineError(f"dimension {dim} smaller than patch {patch}")
    span = dim - patch
    if span == 0:
        return [0]
    step = min(stride, patch)
    n = -(-span // step) + 1
    return [i * span // (n - 1) for i in range(n)]


def extract_test_patches(image: np.ndarray, patch: int, stride: int) -> tuple[np.ndarray, PatchGrid]:
    _, h, w = image.shape
    if h < patch or w < patch:
        raise PipelineError(f"image {h}x{w} is smaller than one {patch}x{patch} patch")
    rows, cols = axis_origins(h, patch, stride), axis_origins(w, patch, stride)
    origins = [(r, c) for r in rows for c in cols]
    patches = np.stack([image[:, r:r + patch, c:c + patch] for r, c in origins])
    return patches, PatchGrid(patch, origins, h, w)


def reconstruct(prob_patches, grid: PatchGrid) -> np.ndarray:
    """Average overlapping patch predictions back onto the source extent."""
    if len(prob_patches) != len(grid.origins):
        raise PipelineError(
            f"{len(prob_patches)} patches given for a grid with {len(grid.origins)} origins"
        )
    p = grid.patch
    total = np.zeros((grid.source_h, grid.source_w), np.float64)
    count = np.zeros((grid.source_h, grid.source_w), np.int32)
    for pred, (r, c) in zip(prob_patches, grid.origins):
        pred = np.asarray(pred).reshape(p, p)
        total[r:r + p, c:c + p] += pred
        count[r:r + p, c:c + p] += 1
    if (count == 0).any():
        raise PipelineError("grid leaves pixels uncovered")
    return (total / count).astype(np.float32)


# ---------------------------------------------------------------------------
# dataset file


def write_dataset(path, scenes: Sequence[Scene]) -> Path:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<HI", DATASET_VERSION, len(scenes)))
        for s in scenes:
            c, h, w = s.image.shape
            fh.write(struct.pack("<III", h, w, c))
            fh.write(s.image.astype("<f4").tobytes())
            fh.write(s.mask.astype(np.uint8).tobytes())
    return path


def read_dataset(path) -> list[Scene]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedFileError(
                f"{path}: truncated while reading {what} (need {n} bytes at offset {pos}, file has {len(buf)})"
            )
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    magic = take(4, "magic")
    if magic != DATASET_MAGIC:
        raise BadMagicError(f"{path}: expected magic {DATASET_MAGIC!r}, found {magic!r}")
    version, count = struct.unpack("<HI", take(6, "header"))
    if version != DATASET_VERSION:
        raise UnsupportedVersionError(f"{path}: dataset version {version}, expected {DATASET_VERSION}")
    scenes = []
    for k in range(count):
        h, w, c = struct.unpack("<III", take(12, f"scene {k} dims"))
        image = np.frombuffer(take(4 * c * h * w, f"scene {k} image"), dtype="<f4").reshape(c, h, w)
        mask = np.frombuffer(take(h * w, f"scene {k} mask"), dtype=np.uint8).reshape(h, w)
        scenes.append(Scene(image.astype(np.float32), mask.copy()))
    return scenes
