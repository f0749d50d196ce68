"""Box algebra in normalized center-size coordinates.

Boxes travel through the pipeline as ``(N, 4)`` arrays of ``(cx, cy, w, h)``
in the unit square. Corner format ``(x0, y0, x1, y1)`` is only used at the
metric/report boundary and inside the overlap computations.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, clamp_min, maximum, minimum

MIN_SIDE = 1e-6


class DegenerateBoxError(ValueError):
    pass


class SingularTransformError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    """Axis-aligned box; clipped to the unit square on construction."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        x0, y0, x1, y1 = cxcywh_to_xyxy(np.array([[self.cx, self.cy, self.w, self.h]], dtype=float))[0]
        x0, x1 = np.clip([x0, x1], 0.0, 1.0)
        y0, y1 = np.clip([y0, y1], 0.0, 1.0)
        if x1 - x0 <= MIN_SIDE or y1 - y0 <= MIN_SIDE:
            raise DegenerateBoxError(f"degenerate box {self}")
        object.__setattr__(self, "cx", float((x0 + x1) / 2))
        object.__setattr__(self, "cy", float((y0 + y1) / 2))
        object.__setattr__(self, "w", float(x1 - x0))
        object.__setattr__(self, "h", float(y1 - y0))

    @classmethod
    def from_xyxy(cls, x0: float, y0: float, x1: float, y1: float) -> "Box":
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h])

    def xyxy(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @property
    def area(self) -> float:
        return self.w * self.h


def boxes_array(boxes) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        return boxes.reshape(-1, 4).astype(float)
    return np.array([b.as_array() if isinstance(b, Box) else b for b in boxes], dtype=float).reshape(-1, 4)


def cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=float)
    half = b[..., 2:] / 2
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def xyxy_to_cxcywh(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=float)
    return np.concatenate([(b[..., :2] + b[..., 2:]) / 2, b[..., 2:] - b[..., :2]], axis=-1)


def clip_boxes(boxes: np.ndarray) -> np.ndarray:
    """Clip center-size boxes to the unit square (may produce zero-size boxes)."""
    xyxy = np.clip(cxcywh_to_xyxy(boxes), 0.0, 1.0)
    return xyxy_to_cxcywh(xyxy)


def valid_mask(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes).reshape(-1, 4)
    return (boxes[:, 2] > MIN_SIDE) & (boxes[:, 3] > MIN_SIDE)


def _pair_terms(a: np.ndarray, b: np.ndarray):
    a = cxcywh_to_xyxy(a)[:, None, :]
    b = cxcywh_to_xyxy(b)[None, :, :]
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    ew = np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0])
    eh = np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])
    return inter, union, ew * eh


def pairwise_iou(a, b) -> np.ndarray:
    """IoU matrix between two box sets, shape ``(len(a), len(b))``."""
    a, b = boxes_array(a), boxes_array(b)
    inter, union, _ = _pair_terms(a, b)
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def pairwise_giou(a, b) -> np.ndarray:
    a, b = boxes_array(a), boxes_array(b)
    inter, union, enclose = _pair_terms(a, b)
    iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return iou - np.where(enclose > 0, (enclose - union) / np.where(enclose > 0, enclose, 1.0), 0.0)


def iou(a: Box, b: Box) -> float:
    return float(pairwise_iou([a], [b])[0, 0])


def giou(a: Box, b: Box) -> float:
    return float(pairwise_giou([a], [b])[0, 0])


def giou_tensor(pred: Tensor, target: np.ndarray) -> Tensor:
    """Row-wise GIoU between predicted (differentiable) and fixed target boxes, both ``(K, 4)``."""
    t = cxcywh_to_xyxy(target)
    cx, cy, w, h = pred[:, 0], pred[:, 1], pred[:, 2], pred[:, 3]
    px0, py0 = cx - w * 0.5, cy - h * 0.5
    px1, py1 = cx + w * 0.5, cy + h * 0.5
    tx0, ty0, tx1, ty1 = (Tensor(t[:, i]) for i in range(4))
    iw = clamp_min(minimum(px1, tx1) - maximum(px0, tx0), 0.0)
    ih = clamp_min(minimum(py1, ty1) - maximum(py0, ty0), 0.0)
    inter = iw * ih
    union = w * h + Tensor(target[:, 2] * target[:, 3]) - inter
    enclose = (maximum(px1, tx1) - minimum(px0, tx0)) * (maximum(py1, ty1) - minimum(py0, ty0))
    return inter / union - (enclose - union) / enclose


def nms(boxes, scores, iou_threshold: float) -> list[int]:
    """Greedy suppression; ties on score go to the lower input index."""
    boxes = boxes_array(boxes)
    scores = np.asarray(scores, dtype=float)
    if len(boxes) != len(scores):
        raise ValueError(f"nms: {len(boxes)} boxes but {len(scores)} scores")
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    ious = pairwise_iou(boxes, boxes)
    keep: list[int] = []
    suppressed = np.zeros(len(scores), dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > iou_threshold
    return keep


@dataclass(frozen=True)
class AffineTransform:
    """2x3 map over normalized coordinates: ``p' = A @ p + t``."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float).reshape(2, 3)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))

    @classmethod
    def translation(cls, dx: float, dy: float) -> "AffineTransform":
        return cls(np.array([[1.0, 0.0, dx], [0.0, 1.0, dy]]))

    @classmethod
    def scaling(cls, sx: float, sy: float, center=(0.5, 0.5)) -> "AffineTransform":
        cx, cy = center
        return cls(np.array([[sx, 0.0, cx - sx * cx], [0.0, sy, cy - sy * cy]]))

    @classmethod
    def hflip(cls) -> "AffineTransform":
        return cls(np.array([[-1.0, 0.0, 1.0], [0.0, 1.0, 0.0]]))

    @classmethod
    def rotation(cls, degrees: float, center=(0.5, 0.5)) -> "AffineTransform":
        th = np.deg2rad(degrees)
        c, s = np.cos(th), np.sin(th)
        cx, cy = center
        lin = np.array([[c, -s], [s, c]])
        t = np.array([cx, cy]) - lin @ np.array([cx, cy])
        return cls(np.hstack([lin, t[:, None]]))

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:, :2]

    @property
    def offset(self) -> np.ndarray:
        return self.matrix[:, 2]

    @property
    def invertible(self) -> bool:
        return abs(np.linalg.det(self.linear)) > 1e-12

    def homogeneous(self) -> np.ndarray:
        return np.vstack([self.matrix, [0.0, 0.0, 1.0]])

    def inverse(self) -> "AffineTransform":
        if not self.invertible:
            raise SingularTransformError("transform is singular")
        return AffineTransform(np.linalg.inv(self.homogeneous())[:2])

    def then(self, other: "AffineTransform") -> "AffineTransform":
        """Apply ``self`` first, then ``other``."""
        return AffineTransform((other.homogeneous() @ self.homogeneous())[:2])

    def apply_points(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=float) @ self.linear.T + self.offset

    def to_json(self) -> list:
        return self.matrix.tolist()


def compose(first: AffineTransform, second: AffineTransform) -> AffineTransform:
    return first.then(second)


def transform_boxes(boxes, t: AffineTransform, clip: bool = True) -> np.ndarray:
    """Map corners through ``t``, re-fit the axis-aligned hull, optionally clip."""
    if not t.invertible:
        raise SingularTransformError("cannot map boxes through a singular transform")
    b = boxes_array(boxes)
    if len(b) == 0:
        return b
    x0, y0, x1, y1 = cxcywh_to_xyxy(b).T
    corners = np.stack([np.stack([x0, y0], -1), np.stack([x1, y0], -1), np.stack([x0, y1], -1), np.stack([x1, y1], -1)], 1)
    mapped = corners @ t.linear.T + t.offset
    lo = mapped.min(axis=1)
    hi = mapped.max(axis=1)
    out = xyxy_to_cxcywh(np.concatenate([lo, hi], axis=1))
    return clip_boxes(out) if clip else out
