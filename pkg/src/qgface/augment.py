"""Low-quality degradations used to build (original, augmented) training pairs."""

import io
from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageEnhance

from .errors import InvalidInputError


@dataclass
class AugmentConfig:
    p_per_transform: float = 0.5
    scale_range: tuple = (0.25, 1.0)
    min_crop_area: float = 0.8
    max_rotation_deg: float = 30.0
    color_jitter_strength: float = 0.2
    jpeg_quality_range: tuple = (30, 90)
    input_size: tuple = (112, 112)
    seed: int = 0

    def __post_init__(self):
        self.scale_range = tuple(float(v) for v in self.scale_range)
        self.jpeg_quality_range = tuple(int(v) for v in self.jpeg_quality_range)
        self.input_size = tuple(int(v) for v in self.input_size)
        if not 0.0 <= self.p_per_transform <= 1.0:
            raise InvalidInputError("p_per_transform must lie in [0, 1]")
        lo, hi = self.scale_range
        if not (0.0 < lo <= hi <= 1.0):
            raise InvalidInputError(f"scale_range must satisfy 0 < lo <= hi <= 1, got {self.scale_range}")
        if not 0.0 < self.min_crop_area <= 1.0:
            raise InvalidInputError("min_crop_area must lie in (0, 1]")
        qlo, qhi = self.jpeg_quality_range
        if not 1 <= qlo <= qhi <= 100:
            raise InvalidInputError("jpeg_quality_range must lie within [1, 100]")
        if self.color_jitter_strength < 0 or self.max_rotation_deg < 0:
            raise InvalidInputError("jitter strength and rotation must be non-negative")


def _check_image(image, cfg):
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise InvalidInputError(f"expected an HxWx3 uint8 image, got {image.dtype} {image.shape}")
    if cfg is not None and image.shape[:2] != tuple(cfg.input_size):
        raise InvalidInputError(f"image is {image.shape[:2]}, configured input size is {cfg.input_size}")
    return image


def downscale(image, factor):
    h, w = image.shape[:2]
    size = (max(1, int(round(w * factor))), max(1, int(round(h * factor))))
    return np.asarray(Image.fromarray(image).resize(size, Image.BILINEAR))


def upscale(image, size):
    h, w = size
    return np.asarray(Image.fromarray(image).resize((w, h), Image.BILINEAR))


def down_up(image, factor):
    """Downsample by ``factor`` then back to the original size, bilinear both ways."""
    return upscale(downscale(image, factor), image.shape[:2])


def jpeg_roundtrip(image, quality):
    buf = io.BytesIO()
    Image.fromarray(image).save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    return np.asarray(Image.open(buf).convert("RGB"))


def crop_resize(image, area_frac, aspect, top_frac, left_frac):
    h, w = image.shape[:2]
    cw = int(np.clip(round(np.sqrt(area_frac * aspect) * w), 1, w))
    ch = int(np.clip(round(np.sqrt(area_frac / aspect) * h), 1, h))
    top = int(round(top_frac * (h - ch)))
    left = int(round(left_frac * (w - cw)))
    crop = image[top:top + ch, left:left + cw]
    return upscale(np.ascontiguousarray(crop), (h, w))


def rotate(image, degrees):
    img = Image.fromarray(image).rotate(degrees, resample=Image.BILINEAR, fillcolor=(0, 0, 0))
    return np.asarray(img)


def color_jitter(image, brightness, contrast, saturation):
    img = Image.fromarray(image)
    img = ImageEnhance.Brightness(img).enhance(brightness)
    img = ImageEnhance.Contrast(img).enhance(contrast)
    img = ImageEnhance.Color(img).enhance(saturation)
    return np.asarray(img)


def augment_image(image, cfg, rng):
    """Apply each degradation independently with probability ``cfg.p_per_transform``.

    Order is fixed: crop & resize, rotation, colour jitter, down-up scaling,
    JPEG.  Returns a new HxWx3 uint8 array of the input's shape.
    """
    image = _check_image(image, cfg)
    out = image.copy()
    p = cfg.p_per_transform

    if rng.random() < p:
        area = rng.uniform(cfg.min_crop_area, 1.0)
        aspect = np.exp(rng.uniform(np.log(3 / 4), np.log(4 / 3)))
        out = crop_resize(out, area, aspect, rng.random(), rng.random())
    if rng.random() < p:
        out = rotate(out, rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg))
    if rng.random() < p:
        k = cfg.color_jitter_strength
        out = color_jitter(out, *(1.0 + rng.uniform(-k, k, size=3)))
    if rng.random() < p:
        out = down_up(out, rng.uniform(*cfg.scale_range))
    if rng.random() < p:
        lo, hi = cfg.jpeg_quality_range
        out = jpeg_roundtrip(out, rng.integers(lo, hi + 1))
    return np.ascontiguousarray(out, dtype=np.uint8)


def make_pair_batch(images, cfg, rng, augment=True):
    """Build aligned (original, augmented) batches from a batch of images.

    Originals only get a horizontal flip with probability 0.5.  Each image
    draws from its own child generator, so results do not depend on the order
    images are processed in.  With ``augment=False`` the second element is
    None.
    """
    images = np.asarray(images)
    if images.ndim != 4 or len(images) == 0:
        raise InvalidInputError(f"expected a non-empty (B, H, W, 3) batch, got {images.shape}")
    children = rng.spawn(len(images))
    originals = np.empty_like(images)
    augmented = np.empty_like(images) if augment else None
    for i, (img, child) in enumerate(zip(images, children)):
        originals[i] = img[:, ::-1] if child.random() < 0.5 else img
        if augment:
            augmented[i] = augment_image(img, cfg, child)
    return originals, augmented


def pair_grid(originals, augmented, columns=8):
    """Tile pairs side by side: each cell is [original | augmented]."""
    originals = np.asarray(originals)
    augmented = np.asarray(augmented)
    n, h, w, _ = originals.shape
    rows = int(np.ceil(n / columns))
    grid = np.zeros((rows * h, columns * 2 * w, 3), dtype=np.uint8)
    for i in range(n):
        r, c = divmod(i, columns)
        grid[r * h:(r + 1) * h, 2 * c * w:(2 * c + 1) * w] = originals[i]
        grid[r * h:(r + 1) * h, (2 * c + 1) * w:(2 * c + 2) * w] = augmented[i]
    return grid
