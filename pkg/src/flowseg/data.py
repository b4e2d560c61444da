"""Image/mask pairs: synthetic blob datasets, directory ingestion and splitting.

Images are ``(H, W, C)`` float32 arrays normalized to ``[-1, 1]``; masks are
``(H, W)`` uint8 arrays holding only 0 and 1.  Pixel ``(i, j)`` has its centre
at ``x = j + 0.5, y = i + 0.5``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import ConfigError, IngestionError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
N_JITTER_VERTICES = 16


@dataclass(frozen=True)
class DatasetPair:
    image: np.ndarray
    mask: np.ndarray
    id: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.mask.ndim != 2:
            raise ValueError("image must be (H, W, C) and mask (H, W)")
        if self.image.shape[:2] != self.mask.shape:
            raise ValueError(
                f"{self.id}: image {self.image.shape[:2]} and mask {self.mask.shape} differ"
            )


@dataclass(frozen=True)
class SyntheticShapeSpec:
    count: int = 200
    size: int = 32
    shapes_per_image: tuple[int, int] = (1, 3)
    boundary_jitter: float = 0.6
    texture_noise: float = 0.05
    seed: int = 0
    channels: int = 3

    def validate(self):
        if self.count < 1:
            raise ConfigError(f"count must be >= 1, got {self.count}")
        if not is_valid_size(self.size):
            raise ConfigError(f"size must be a power of two >= 16, got {self.size}")
        lo, hi = self.shapes_per_image
        if not 1 <= lo <= hi:
            raise ConfigError(f"invalid shapes-per-image range {self.shapes_per_image}")
        if self.boundary_jitter < 0:
            raise ConfigError("boundary jitter must be >= 0")
        if not 0 <= self.texture_noise <= 1:
            raise ConfigError("texture noise must lie in [0, 1]")
        if self.channels not in (1, 3):
            raise ConfigError("channels must be 1 or 3")


def is_valid_size(size: int) -> bool:
    return size >= 16 and size & (size - 1) == 0


@dataclass(frozen=True)
class Blob:
    """A jittered ellipse: centre, semi-axes, rotation and radial offsets."""

    cx: float
    cy: float
    a: float
    b: float
    angle: float
    offsets: np.ndarray  # pixels, one per vertex, evenly spaced in polar angle

    def contains(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        dx, dy = x - self.cx, y - self.cy
        c, s = math.cos(self.angle), math.sin(self.angle)
        u = c * dx + s * dy
        v = -s * dx + c * dy
        q = (u / self.a) ** 2 + (v / self.b) ** 2
        if not np.any(self.offsets):
            return q <= 1.0
        phi = np.arctan2(v, u)
        # radius of the unjittered ellipse along phi
        r_e = self.a * self.b / np.sqrt((self.b * np.cos(phi)) ** 2 + (self.a * np.sin(phi)) ** 2)
        k = len(self.offsets)
        pos = np.mod(phi, 2 * math.pi) / (2 * math.pi) * k
        lo = np.floor(pos).astype(int) % k
        frac = pos - np.floor(pos)
        delta = (1 - frac) * self.offsets[lo] + frac * self.offsets[(lo + 1) % k]
        scale = np.maximum(1.0 + delta / r_e, 0.0)
        return q <= scale**2


def pixel_grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    coords = np.arange(size, dtype=np.float64) + 0.5
    return np.meshgrid(coords, coords, indexing="xy")


def random_blobs(spec: SyntheticShapeSpec, rng: np.random.Generator) -> list[Blob]:
    lo, hi = spec.shapes_per_image
    n = int(rng.integers(lo, hi + 1))
    size = spec.size
    blobs = []
    for _ in range(n):
        a, b = rng.uniform(0.12, 0.28, size=2) * size
        cx, cy = rng.uniform(0.25, 0.75, size=2) * size
        angle = rng.uniform(0.0, math.pi)
        offsets = rng.normal(0.0, 1.0, size=N_JITTER_VERTICES) * spec.boundary_jitter
        blobs.append(Blob(cx, cy, a, b, angle, offsets))
    return blobs


def rasterize(blobs: Sequence[Blob], size: int) -> np.ndarray:
    x, y = pixel_grid(size)
    inside = np.zeros((size, size), dtype=bool)
    for blob in blobs:
        inside |= blob.contains(x, y)
    return inside.astype(np.uint8)


def _smooth_noise(rng: np.random.Generator, shape: tuple[int, ...], sigma: float) -> np.ndarray:
    noise = ndimage.gaussian_filter(rng.normal(size=shape), sigma=(sigma, sigma, 0), mode="wrap")
    return noise / max(noise.std(), 1e-12)


def render_image(mask: np.ndarray, spec: SyntheticShapeSpec, rng: np.random.Generator) -> np.ndarray:
    size, ch = spec.size, spec.channels
    background = rng.uniform(0.45, 0.75, size=ch)
    contrast = rng.uniform(0.25, 0.45) * rng.uniform(0.7, 1.0, size=ch)
    foreground = background - contrast

    x, y = pixel_grid(size)
    gx, gy = rng.normal(0.0, 0.08, size=2)
    shading = (gx * (x / size - 0.5) + gy * (y / size - 0.5))[..., None]

    soft = ndimage.gaussian_filter(mask.astype(np.float64), sigma=0.7)[..., None]
    img = background + (foreground - background) * soft + shading
    if spec.texture_noise > 0:
        img = img + 0.5 * spec.texture_noise * _smooth_noise(rng, (size, size, ch), sigma=1.5)
    img = np.clip(img, 0.0, 1.0)
    return ((img - 0.5) / 0.5).astype(np.float32)


def generate_item(spec: SyntheticShapeSpec, index: int) -> DatasetPair:
    rng = np.random.default_rng([spec.seed, index])
    blobs = random_blobs(spec, rng)
    mask = rasterize(blobs, spec.size)
    image = render_image(mask, spec, rng)
    return DatasetPair(image=image, mask=mask, id=f"{index:05d}")


def generate_synthetic(spec: SyntheticShapeSpec) -> list[DatasetPair]:
    """Render ``spec.count`` blob images with exact union-of-blob masks.

    Item ``i`` draws from a generator seeded by ``(spec.seed, i)`` so any
    subset of items can be produced independently with identical output.
    """
    spec.validate()
    return [generate_item(spec, i) for i in range(spec.count)]


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Map a ``[-1, 1]`` image to 8-bit values."""
    return np.round((np.clip(image, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)


def write_pair_directory(pairs: Sequence[DatasetPair], root: str | Path) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for pair in pairs:
        img = to_uint8(pair.image)
        img = img[..., 0] if img.shape[-1] == 1 else img
        Image.fromarray(img).save(root / "images" / f"{pair.id}.png")
        Image.fromarray((pair.mask * 255).astype(np.uint8)).save(root / "masks" / f"{pair.id}.png")
    return root


def _index_images(folder: Path) -> dict[str, Path]:
    if not folder.is_dir():
        raise IngestionError(f"missing directory: {folder}")
    found: dict[str, Path] = {}
    for p in sorted(folder.iterdir()):
        if p.suffix.lower() in IMAGE_SUFFIXES:
            if p.stem in found:
                raise IngestionError(f"duplicate basename: {p.stem}")
            found[p.stem] = p
    return found


def _read(path: Path, mode: str) -> Image.Image:
    try:
        with Image.open(path) as im:
            return im.convert(mode)
    except (OSError, UnidentifiedImageError) as exc:
        raise IngestionError(f"unreadable file: {path}") from exc


def normalize_image(pixels: np.ndarray) -> np.ndarray:
    """8-bit pixels to ``[-1, 1]`` with mean 0.5 and std 0.5."""
    return ((pixels.astype(np.float32) / 255.0 - 0.5) / 0.5).astype(np.float32)


def load_pair_directory(path: str | Path, target_size: int, channels: int = 3) -> list[DatasetPair]:
    """Read ``images/`` and ``masks/`` under ``path`` into normalized pairs.

    Images are resized bilinearly, masks with nearest neighbour and then
    binarized at half intensity.  Pairs come back sorted by basename.
    """
    root = Path(path)
    if not root.is_dir():
        raise IngestionError(f"missing data directory: {root}")
    if not is_valid_size(target_size):
        raise ConfigError(f"target size must be a power of two >= 16, got {target_size}")
    images = _index_images(root / "images")
    masks = _index_images(root / "masks")
    orphans = sorted(set(images) ^ set(masks))
    if orphans:
        raise IngestionError(f"orphan: {orphans[0]}")
    if not images:
        raise IngestionError(f"no image/mask pairs under {root}")

    mode = "RGB" if channels == 3 else "L"
    pairs = []
    for stem in sorted(images):
        im = _read(images[stem], mode)
        mk = _read(masks[stem], "L")
        if im.size != (target_size, target_size):
            im = im.resize((target_size, target_size), Image.BILINEAR)
        if mk.size != (target_size, target_size):
            mk = mk.resize((target_size, target_size), Image.NEAREST)
        pixels = np.asarray(im)
        if pixels.ndim == 2:
            pixels = pixels[..., None]
        mask = (np.asarray(mk).astype(np.float32) / 255.0 >= 0.5).astype(np.uint8)
        pairs.append(DatasetPair(image=normalize_image(pixels), mask=mask, id=stem))
    return pairs


def split_sizes(n: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    if len(fractions) != 3:
        raise ConfigError("fractions must be (train, val, test)")
    if any(f <= 0 for f in fractions):
        raise ConfigError(f"every split fraction must be positive, got {tuple(fractions)}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {sum(fractions)!r}")
    n_val = int(round(n * fractions[1]))
    n_test = int(round(n * fractions[2]))
    n_train = n - n_val - n_test
    if n_train < 0:
        raise ConfigError(f"cannot split {n} items by {tuple(fractions)}")
    return n_train, n_val, n_test


def split(dataset: Sequence[DatasetPair], fractions: Sequence[float], seed: int):
    """Shuffle deterministically and cut into train/val/test.

    Val and test get the rounded fractions; the remainder goes to train.
    """
    n_train, n_val, _ = split_sizes(len(dataset), fractions)
    order = np.random.default_rng(seed).permutation(len(dataset))
    items = [dataset[i] for i in order]
    return items[:n_train], items[n_train:n_train + n_val], items[n_train + n_val:]


def stack_images(pairs: Sequence[DatasetPair]) -> np.ndarray:
    """``(B, C, H, W)`` float32 batch."""
    return np.stack([p.image.transpose(2, 0, 1) for p in pairs]).astype(np.float32)


def stack_masks(pairs: Sequence[DatasetPair]) -> np.ndarray:
    """``(B, 1, H, W)`` float32 batch of {0, 1}."""
    return np.stack([p.mask[None] for p in pairs]).astype(np.float32)
