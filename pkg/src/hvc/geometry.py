"""Crop-pair sampling and the coordinate machinery behind the positive mask.

Coordinates are normalized by the source image width/height, so a
positive radius is a fraction of the image extent.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np
from scipy import ndimage

from .exceptions import RetriesExhausted, ShapeMismatch


@dataclass
class CropConfig:
    view_size: int = 64
    scale_range: tuple = (0.2, 1.0)
    ratio_range: tuple = (3.0 / 4.0, 4.0 / 3.0)
    min_overlap: float = 0.1
    max_retries: int = 20
    min_side: int = 32

    def validate(self):
        lo, hi = self.scale_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError(f"scale_range must lie in (0, 1], got {self.scale_range}")
        rlo, rhi = self.ratio_range
        if not (0.0 < rlo <= rhi):
            raise ValueError(f"invalid ratio_range {self.ratio_range}")
        if not (0.0 <= self.min_overlap < 1.0):
            raise ValueError(f"min_overlap must lie in [0, 1), got {self.min_overlap}")
        if self.max_retries < 1 or self.view_size < 1:
            raise ValueError("max_retries and view_size must be positive")
        return self


@dataclass(frozen=True)
class CropSpec:
    """Crop rectangle in source pixels (half-open) plus the resized view size."""

    x0: int
    y0: int
    x1: int
    y1: int
    out_h: int
    out_w: int

    @property
    def area(self):
        return (self.x1 - self.x0) * (self.y1 - self.y0)


@dataclass
class GridCoords:
    xs: np.ndarray
    ys: np.ndarray

    @property
    def shape(self):
        return self.xs.shape

    def flat(self):
        return np.stack([self.xs.ravel(), self.ys.ravel()], axis=1)


class PositiveMask(NamedTuple):
    values: np.ndarray
    radius: float
    count: int


def overlap_ratio(a: CropSpec, b: CropSpec) -> float:
    """Intersection-over-union of two crop rectangles."""
    iw = max(0, min(a.x1, b.x1) - max(a.x0, b.x0))
    ih = max(0, min(a.y1, b.y1) - max(a.y0, b.y0))
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def _random_crop(img_h, img_w, rng, cfg):
    area = img_h * img_w * rng.uniform(*cfg.scale_range)
    ratio = rng.uniform(*cfg.ratio_range)
    # keep the rectangle inside the image; widen the ratio bounds only if
    # the configured range has no feasible value at this area
    lo, hi = area / img_h**2, img_w**2 / area
    ratio = min(max(ratio, lo), hi)
    w = min(img_w, max(1, int(round(math.sqrt(area * ratio)))))
    h = min(img_h, max(1, int(round(math.sqrt(area / ratio)))))
    x0 = int(rng.integers(0, img_w - w + 1))
    y0 = int(rng.integers(0, img_h - h + 1))
    return CropSpec(x0, y0, x0 + w, y0 + h, cfg.view_size, cfg.view_size)


def sample_crop_pair(img_h, img_w, rng, cfg=None, propose: Optional[Callable] = None):
    """Draw two crops of one image whose IoU is at least ``cfg.min_overlap``.

    ``propose(img_h, img_w, rng, cfg)`` replaces the single-crop sampler; it
    exists so tests can force specific rectangles.

    Raises
    ------
    RetriesExhausted
        If ``cfg.max_retries`` attempts never reach the overlap threshold.
    """
    cfg = (cfg or CropConfig()).validate()
    if img_h < cfg.min_side or img_w < cfg.min_side:
        raise ValueError(f"image {img_h}x{img_w} smaller than min_side={cfg.min_side}")
    propose = propose or _random_crop
    for _ in range(cfg.max_retries):
        c1 = propose(img_h, img_w, rng, cfg)
        c2 = propose(img_h, img_w, rng, cfg)
        if overlap_ratio(c1, c2) >= cfg.min_overlap:
            return c1, c2
    raise RetriesExhausted(
        f"no crop pair with overlap >= {cfg.min_overlap} after {cfg.max_retries} tries"
    )


def crop_view(image, crop: CropSpec):
    """Bilinearly resample ``image[y0:y1, x0:x1]`` to ``out_h x out_w``.

    Sample points are output pixel centers mapped into the crop rectangle.
    """
    image = np.asarray(image)
    sy = (crop.y1 - crop.y0) / crop.out_h
    sx = (crop.x1 - crop.x0) / crop.out_w
    ys = crop.y0 + (np.arange(crop.out_h) + 0.5) * sy - 0.5
    xs = crop.x0 + (np.arange(crop.out_w) + 0.5) * sx - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    out = np.empty((crop.out_h, crop.out_w, image.shape[2]), dtype=image.dtype)
    for c in range(image.shape[2]):
        out[..., c] = ndimage.map_coordinates(
            image[..., c], [yy, xx], order=1, mode="nearest"
        )
    return out


def warp_coords(crop: CropSpec, feat_h, feat_w, src_h, src_w) -> GridCoords:
    """Map each feature cell center back to normalized source coordinates."""
    if feat_h < 1 or feat_w < 1:
        raise ValueError("feature grid must be at least 1x1")
    bx = (np.arange(feat_w) + 0.5) * (crop.x1 - crop.x0) / feat_w
    by = (np.arange(feat_h) + 0.5) * (crop.y1 - crop.y0) / feat_h
    xs = (crop.x0 + bx) / src_w
    ys = (crop.y0 + by) / src_h
    xx, yy = np.meshgrid(xs, ys, indexing="xy")
    return GridCoords(xs=xx, ys=yy)


def distance_matrix(c1: GridCoords, c2: GridCoords) -> np.ndarray:
    if c1.shape != c2.shape:
        raise ShapeMismatch(f"grid shapes differ: {c1.shape} vs {c2.shape}")
    p, q = c1.flat(), c2.flat()
    diff = p[:, None, :] - q[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def positive_mask(D, r) -> PositiveMask:
    if not r > 0:
        raise ValueError(f"positive radius must be > 0, got {r}")
    values = np.asarray(D) <= r
    return PositiveMask(values=values, radius=float(r), count=int(values.sum()))
