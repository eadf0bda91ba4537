"""Geometric augmentation applied identically to image and masks.

A sampled transform combines zoom, rotation about the image center, and
translation into one inverse-mapped affine resampling with
nearest-neighbor interpolation, followed by an optional horizontal flip.
Out-of-bounds source coordinates replicate the nearest edge pixel.
Nearest-neighbor lookup moves every channel by the same source index, so
masks stay binary and region nesting survives any transform. An identity
transform returns the sample bitwise unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import RegionMaskSet, Sample


@dataclass(frozen=True)
class AugConfig:
    rotation_deg: float = 25.0
    shift_frac: float = 0.20
    zoom_frac: float = 0.20
    hflip_prob: float = 0.5
    fill: str = "nearest"
    seed: int = 0

    def __post_init__(self):
        if self.rotation_deg < 0 or self.shift_frac < 0 or self.zoom_frac < 0:
            raise ValueError("augmentation bounds must be nonnegative")
        if self.zoom_frac >= 1.0:
            raise ValueError("zoom_frac must be < 1 (zoom factor stays positive)")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must be in [0,1]")
        if self.fill != "nearest":
            raise ValueError(f"only 'nearest' fill is supported, got {self.fill!r}")

    def to_dict(self) -> dict:
        return {
            "rotation_deg": self.rotation_deg,
            "shift_frac": self.shift_frac,
            "zoom_frac": self.zoom_frac,
            "hflip_prob": self.hflip_prob,
            "fill": self.fill,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AugConfig":
        return cls(**d)


@dataclass(frozen=True)
class AffineTransform:
    """Rotation in degrees, shifts as fractions of the image dims, zoom
    factor, and a horizontal-flip flag."""

    rotation_deg: float = 0.0
    shift_y_frac: float = 0.0
    shift_x_frac: float = 0.0
    zoom: float = 1.0
    hflip: bool = False

    @property
    def resample_is_identity(self) -> bool:
        return (self.rotation_deg == 0.0 and self.shift_y_frac == 0.0
                and self.shift_x_frac == 0.0 and self.zoom == 1.0)

    @property
    def is_identity(self) -> bool:
        return self.resample_is_identity and not self.hflip


IDENTITY = AffineTransform()


def sample_transform(config: AugConfig, rng: np.random.Generator) -> AffineTransform:
    """Draw transform parameters uniformly from the configured ranges.

    Draw order is fixed (rotation, shift y, shift x, zoom, flip) so a given
    generator state always yields the same transform.
    """
    r = config.rotation_deg
    s = config.shift_frac
    z = config.zoom_frac
    return AffineTransform(
        rotation_deg=float(rng.uniform(-r, r)),
        shift_y_frac=float(rng.uniform(-s, s)),
        shift_x_frac=float(rng.uniform(-s, s)),
        zoom=float(rng.uniform(1.0 - z, 1.0 + z)),
        hflip=bool(rng.random() < config.hflip_prob),
    )


def _source_indices(h: int, w: int, t: AffineTransform):
    """Integer source coordinates for every output pixel (inverse map)."""
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    dy = t.shift_y_frac * h
    dx = t.shift_x_frac * w
    theta = math.radians(t.rotation_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    oy = rows - cy - dy
    ox = cols - cx - dx
    # forward map: p' = R(theta) * zoom * (p - c) + c + shift
    # inverse:     p  = R(-theta) (p' - c - shift) / zoom + c
    sy = (cos_t * oy + sin_t * ox) / t.zoom + cy
    sx = (-sin_t * oy + cos_t * ox) / t.zoom + cx
    iy = np.clip(np.rint(sy).astype(np.int64), 0, h - 1)
    ix = np.clip(np.rint(sx).astype(np.int64), 0, w - 1)
    return iy, ix


def apply_transform(sample: Sample, t: AffineTransform) -> Sample:
    """Resample image and masks with one shared nearest-neighbor lookup."""
    image = sample.image
    mask_stack = sample.masks.stack()
    if image.shape[:2] != mask_stack.shape[:2]:
        raise ValueError(
            f"image/mask shape mismatch: {image.shape[:2]} vs {mask_stack.shape[:2]}")
    h, w = image.shape[:2]
    if not t.resample_is_identity:
        iy, ix = _source_indices(h, w, t)
        image = image[iy, ix]
        mask_stack = mask_stack[iy, ix]
    if t.hflip:
        image = image[:, ::-1].copy()
        mask_stack = mask_stack[:, ::-1].copy()
    return Sample(image=np.ascontiguousarray(image),
                  masks=RegionMaskSet.from_stack(np.ascontiguousarray(mask_stack)),
                  id=sample.id)


def augment_sample(sample: Sample, config: AugConfig,
                   rng: np.random.Generator) -> Sample:
    return apply_transform(sample, sample_transform(config, rng))
