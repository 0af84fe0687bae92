"""Datasets: procedural sprites with known factors, MNIST IDX files, augmentation."""

from __future__ import annotations

import itertools
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import checkpoint, spatial
from .errors import BadMagic, TruncatedFile
from .tensor import Tensor

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

SPRITE_SIZE = 64
SPRITE_RADIUS = 8.0  # half side of the unit-scale square, in pixels
SHAPES = ("square", "ellipse", "triangle")
FACTOR_NAMES = ("shape", "scale", "orientation", "posX", "posY")
DEFAULT_COUNTS = (3, 6, 8, 8, 8)


@dataclass
class FactorSpec:
    name: str
    type: str  # "discrete" or "continuous"
    cardinality: int

    def header(self) -> str:
        return f"{self.name}:{self.type}:{self.cardinality}"


@dataclass
class LabeledImageDataset:
    images: np.ndarray   # (N, C, H, W) in [0, 1]
    factors: np.ndarray  # (N, F) integer codes for discrete factors
    factor_specs: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.images) != len(self.factors):
            raise ValueError("images and factors disagree on N")
        for j, spec in enumerate(self.factor_specs):
            if spec.type == "discrete":
                col = self.factors[:, j]
                if col.size and (col.min() < 0 or col.max() >= spec.cardinality):
                    raise ValueError(f"factor {spec.name} outside [0, {spec.cardinality})")

    def __len__(self):
        return len(self.images)

    def subset(self, idx) -> "LabeledImageDataset":
        return LabeledImageDataset(self.images[idx], self.factors[idx], list(self.factor_specs))

    @property
    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self.images), -1)


# -- sprites -------------------------------------------------------------------
def factor_values(counts: Sequence[int] = DEFAULT_COUNTS) -> dict:
    n_shape, n_scale, n_orient, n_x, n_y = counts
    if not 1 <= n_shape <= len(SHAPES):
        raise ValueError(f"at most {len(SHAPES)} shapes")
    return {
        "shape": np.arange(n_shape),
        "scale": np.linspace(0.5, 1.0, n_scale) if n_scale > 1 else np.array([1.0]),
        "orientation": np.arange(n_orient) * (2.0 * math.pi / n_orient),
        "posX": np.linspace(0.2, 0.8, n_x) if n_x > 1 else np.array([0.5]),
        "posY": np.linspace(0.2, 0.8, n_y) if n_y > 1 else np.array([0.5]),
    }


def _inside(shape: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    if SHAPES[shape] == "square":
        return (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)
    if SHAPES[shape] == "ellipse":
        return u * u + 4.0 * v * v <= 1.0
    # equilateral triangle inscribed in the unit circle, apex up
    inside = np.ones_like(u, dtype=bool)
    for k in range(3):
        a0 = math.pi / 2 + 2 * math.pi * k / 3
        a1 = a0 + 2 * math.pi / 3
        x0, y0, x1, y1 = math.cos(a0), math.sin(a0), math.cos(a1), math.sin(a1)
        inside &= (x1 - x0) * (v - y0) - (y1 - y0) * (u - x0) >= 0.0
    return inside


def shape_area(shape: int, scale: float, radius: float = SPRITE_RADIUS) -> float:
    r = scale * radius
    if SHAPES[shape] == "square":
        return 4.0 * r * r
    if SHAPES[shape] == "ellipse":
        return math.pi * r * (r / 2.0)
    return 3.0 * math.sqrt(3.0) / 4.0 * r * r


def rasterize(shape: int, scale: float, orientation: float, pos_x: float, pos_y: float,
              size: int = SPRITE_SIZE, radius: float = SPRITE_RADIUS) -> np.ndarray:
    """Binary image; a pixel is on when its centre lies inside the shape."""
    c = (np.arange(size) + 0.5)
    xx, yy = np.meshgrid(c, c)
    dx = xx - pos_x * size
    dy = yy - pos_y * size
    ca, sa = math.cos(orientation), math.sin(orientation)
    r = scale * radius
    u = (ca * dx + sa * dy) / r
    v = (-sa * dx + ca * dy) / r
    return _inside(shape, u, v).astype(np.float64)


def generate_sprites(seed: int = 0, counts: Sequence[int] = DEFAULT_COUNTS,
                     subsample: Optional[int] = None) -> LabeledImageDataset:
    """Full Cartesian product of the factor grid, or a seeded subsample of it."""
    values = factor_values(counts)
    grid = np.array(list(itertools.product(*(range(len(values[n])) for n in FACTOR_NAMES))), dtype=np.int64)
    if subsample is not None and subsample < len(grid):
        rng = np.random.default_rng(seed)
        grid = grid[np.sort(rng.choice(len(grid), size=subsample, replace=False))]
    imgs = np.empty((len(grid), 1, SPRITE_SIZE, SPRITE_SIZE))
    for i, (s, sc, o, px, py) in enumerate(grid):
        imgs[i, 0] = rasterize(int(s), values["scale"][sc], values["orientation"][o],
                               values["posX"][px], values["posY"][py])
    specs = [FactorSpec(n, "discrete", len(values[n])) for n in FACTOR_NAMES]
    return LabeledImageDataset(imgs, grid, specs)


# -- IDX -------------------------------------------------------------------------
def load_idx(path) -> np.ndarray:
    """Read an unsigned-byte IDX file.  Images come back scaled to [0, 1]; labels as integers."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise TruncatedFile("IDX header is incomplete")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IDX_IMAGES_MAGIC:
        ndim = 3
    elif magic == IDX_LABELS_MAGIC:
        ndim = 1
    else:
        raise BadMagic(f"unexpected IDX magic 0x{magic:08x}")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise TruncatedFile("IDX dimensions are incomplete")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    n = int(np.prod(dims))
    if len(raw) < head + n:
        raise TruncatedFile(f"IDX body has {len(raw) - head} bytes, expected {n}")
    body = np.frombuffer(raw, dtype=np.uint8, count=n, offset=head).reshape(dims)
    if magic == IDX_IMAGES_MAGIC:
        return body.astype(np.float64) / 255.0
    return body.astype(np.int64)


def write_idx(path, array: np.ndarray):
    """Write unsigned bytes in IDX layout (rank 3 -> images, rank 1 -> labels)."""
    array = np.asarray(array)
    magic = {3: IDX_IMAGES_MAGIC, 1: IDX_LABELS_MAGIC}[array.ndim]
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.astype(np.uint8).tobytes())


def load_mnist(images_path, labels_path=None) -> LabeledImageDataset:
    imgs = load_idx(images_path)[:, None, :, :]
    if labels_path is None:
        labels = np.zeros((len(imgs), 1), dtype=np.int64)
    else:
        labels = load_idx(labels_path).reshape(-1, 1)
    return LabeledImageDataset(imgs, labels, [FactorSpec("digit", "discrete", 10)])


# -- augmentation ------------------------------------------------------------------
def sample_augmentation(rng: np.random.Generator, n: int, max_angle_deg: float = 20.0,
                        max_shift: float = 3.0):
    """Angles (radians) ~ U(-max, max) and pixel shifts ~ U(-max, max)^2."""
    a = math.radians(max_angle_deg)
    angles = rng.uniform(-a, a, size=n)
    shifts = rng.uniform(-max_shift, max_shift, size=(n, 2))
    return angles, shifts


def augment_rotate_translate(images: np.ndarray, seed: int, max_angle_deg: float = 20.0,
                             max_shift: float = 3.0, return_draws: bool = False):
    """Rotate about the centre and translate each image independently (bilinear, zero padding)."""
    images = np.asarray(images, dtype=float)
    squeeze = images.ndim == 3
    if squeeze:
        images = images[:, None]
    N, C, H, W = images.shape
    rng = np.random.default_rng(seed)
    angles, shifts = sample_augmentation(rng, N, max_angle_deg, max_shift)
    vals = np.zeros((N, 6))
    vals[:, 0] = vals[:, 1] = 1.0
    vals[:, 2] = angles
    vals[:, 4] = 2.0 * shifts[:, 0] / W
    vals[:, 5] = 2.0 * shifts[:, 1] / H
    fwd = spatial.TransformParams("affine-decomp", Tensor(vals))
    # sampling through the inverse moves the content by the forward map
    out = spatial.spatial_transform(Tensor(images), spatial.inverse(fwd)).data
    out = np.clip(out, 0.0, 1.0)
    if squeeze:
        out = out[:, 0]
    return (out, angles, shifts) if return_draws else out


def augment_dataset(ds: LabeledImageDataset, seed: int, **kw) -> LabeledImageDataset:
    return LabeledImageDataset(augment_rotate_translate(ds.images, seed, **kw), ds.factors.copy(),
                               list(ds.factor_specs))


# -- batching and splitting ----------------------------------------------------------
def batch_iter(n_or_dataset, batch_size: int, seed: int, epoch: int):
    """Index batches from a per-(seed, epoch) shuffle; the last partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = n_or_dataset if isinstance(n_or_dataset, (int, np.integer)) else len(n_or_dataset)
    order = np.random.default_rng([seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def split_indices(n: int, seed: int, train_frac: float = 0.8):
    perm = np.random.default_rng([seed, 0x5B17]).permutation(n)
    cut = int(round(train_frac * n))
    return np.sort(perm[:cut]), np.sort(perm[cut:])


# -- caching ---------------------------------------------------------------------------
def save_dataset(directory, ds: LabeledImageDataset, name: str = "sprites"):
    os.makedirs(directory, exist_ok=True)
    checkpoint.save(os.path.join(directory, f"{name}.bin"),
                    {"images": ds.images, "factors": ds.factors.astype(np.float64)})
    with open(os.path.join(directory, f"{name}.specs"), "w") as fh:
        fh.write(" ".join(s.header() for s in ds.factor_specs) + "\n")


def load_dataset(directory, name: str = "sprites") -> LabeledImageDataset:
    arrays = checkpoint.load(os.path.join(directory, f"{name}.bin"))
    with open(os.path.join(directory, f"{name}.specs")) as fh:
        specs = []
        for tok in fh.readline().split():
            n, t, c = tok.split(":")
            specs.append(FactorSpec(n, t, int(c)))
    return LabeledImageDataset(arrays["images"], arrays["factors"].astype(np.int64), specs)
