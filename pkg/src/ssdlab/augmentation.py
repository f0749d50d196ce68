"""Weak/strong augmentation with exact affine records for box mapping."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from .geometry import AffineTransform, transform_boxes, valid_mask, boxes_array

MIN_VISIBLE_SIDE = 1.5 / 64


@dataclass(frozen=True)
class AugPolicy:
    """Op probabilities and ranges. Geometric ops are recorded in the returned transform."""

    kind: str = "weak"
    scale_range: tuple = (0.9, 1.1)
    hflip_p: float = 0.5
    brightness_p: float = 0.0
    brightness_delta: float = 0.15
    contrast_p: float = 0.0
    contrast_range: tuple = (0.7, 1.3)
    noise_p: float = 0.0
    noise_std: float = 0.03
    translate_p: float = 0.0
    translate_max: float = 0.1
    rotate_p: float = 0.0
    rotate_max_deg: float = 30.0
    cutout_p: float = 0.0
    cutout_count: tuple = (1, 5)
    cutout_ratio: tuple = (0.05, 0.2)
    fill: float = 0.45

    @classmethod
    def weak(cls) -> "AugPolicy":
        return cls(kind="weak")

    @classmethod
    def strong(cls) -> "AugPolicy":
        return cls(kind="strong", brightness_p=0.25, contrast_p=0.25, noise_p=0.25, translate_p=0.3,
                   rotate_p=0.3, cutout_p=1.0)

    @classmethod
    def labeled(cls) -> "AugPolicy":
        """Strong photometric family without translation/rotation, for labeled images."""
        return cls(kind="strong", brightness_p=0.25, contrast_p=0.25, noise_p=0.25, cutout_p=1.0)

    @classmethod
    def identity(cls) -> "AugPolicy":
        return cls(kind="weak", scale_range=(1.0, 1.0), hflip_p=0.0)

    @classmethod
    def from_dict(cls, d: dict) -> "AugPolicy":
        d = dict(d)
        for key in ("scale_range", "contrast_range", "cutout_count", "cutout_ratio"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AugResult:
    image: np.ndarray
    boxes: np.ndarray
    classes: np.ndarray
    transform: AffineTransform
    kept: np.ndarray  # indices of input annotations that survived


def sample_transform(policy: AugPolicy, rng: np.random.Generator) -> AffineTransform:
    """Draw the geometric part of ``policy``; maps source to augmented normalized coords."""
    t = AffineTransform.identity()
    lo, hi = policy.scale_range
    s = rng.uniform(lo, hi) if hi > lo else lo
    if s != 1.0:
        t = t.then(AffineTransform.scaling(s, s))
    if rng.random() < policy.hflip_p:
        t = t.then(AffineTransform.hflip())
    if rng.random() < policy.rotate_p:
        t = t.then(AffineTransform.rotation(rng.uniform(-policy.rotate_max_deg, policy.rotate_max_deg)))
    if rng.random() < policy.translate_p:
        dx, dy = rng.uniform(-policy.translate_max, policy.translate_max, size=2)
        t = t.then(AffineTransform.translation(dx, dy))
    return t


def warp_image(image: np.ndarray, t: AffineTransform, fill: float = 0.45) -> np.ndarray:
    """Resample ``image`` so that source point p lands at ``t(p)``; bilinear, constant fill."""
    if np.allclose(t.matrix, AffineTransform.identity().matrix):
        return np.array(image, copy=True)
    h, w, c = image.shape
    inv = t.inverse()
    yy, xx = np.mgrid[0:h, 0:w]
    pts = np.stack([(xx + 0.5) / w, (yy + 0.5) / h], axis=-1).reshape(-1, 2)
    src = inv.apply_points(pts)
    rows = src[:, 1] * h - 0.5
    cols = src[:, 0] * w - 0.5
    out = np.empty_like(image)
    for ch in range(c):
        out[..., ch] = map_coordinates(image[..., ch], [rows, cols], order=1, mode="constant", cval=fill).reshape(h, w)
    return out


def photometric(image: np.ndarray, policy: AugPolicy, rng: np.random.Generator) -> np.ndarray:
    img = image
    if rng.random() < policy.brightness_p:
        img = img + rng.uniform(-policy.brightness_delta, policy.brightness_delta)
    if rng.random() < policy.contrast_p:
        mean = img.mean()
        img = (img - mean) * rng.uniform(*policy.contrast_range) + mean
    if rng.random() < policy.noise_p:
        img = img + rng.normal(0, policy.noise_std, size=img.shape)
    if rng.random() < policy.cutout_p:
        h, w, _ = img.shape
        img = np.array(img, copy=True)
        for _ in range(int(rng.integers(policy.cutout_count[0], policy.cutout_count[1] + 1))):
            side = int(max(1, round(rng.uniform(*policy.cutout_ratio) * min(h, w))))
            y0 = int(rng.integers(0, h - side + 1))
            x0 = int(rng.integers(0, w - side + 1))
            img[y0:y0 + side, x0:x0 + side] = policy.fill
    return np.clip(img, 0.0, 1.0)


def apply(image: np.ndarray, boxes, classes, policy: AugPolicy, rng: np.random.Generator) -> AugResult:
    """Augment one image and its annotations; photometric ops never move boxes."""
    t = sample_transform(policy, rng)
    warped = warp_image(image, t, policy.fill)
    out = photometric(warped, policy, rng)
    boxes = boxes_array(boxes)
    classes = np.asarray(classes, dtype=int)
    if len(boxes):
        mapped = transform_boxes(boxes, t)
        keep = valid_mask(mapped) & (mapped[:, 2] >= MIN_VISIBLE_SIDE) & (mapped[:, 3] >= MIN_VISIBLE_SIDE)
        kept = np.flatnonzero(keep)
        return AugResult(out, mapped[kept], classes[kept], t, kept)
    return AugResult(out, boxes, classes, t, np.zeros(0, dtype=int))


def compose_frames(weak_t: AffineTransform, strong_t: AffineTransform) -> AffineTransform:
    """Teacher (weak) frame -> student (strong) frame: ``strong_t`` after ``inverse(weak_t)``."""
    return weak_t.inverse().then(strong_t)
