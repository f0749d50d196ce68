"""Deterministic synthetic shapes detection dataset.

Layout of a dataset directory::

    header.json          spec, seed, size thresholds, format version, split sizes
    <split>.jsonl        one {"id", "boxes", "classes", "areas"} object per image
    <split>.bin          image blob: 8-byte magic, 4 x uint64 (count, H, W, C),
                         then float64 pixels, row-major, little-endian
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
BLOB_MAGIC = b"SSDIMG01"
SHAPE_KINDS = ("square", "circle", "triangle")
COLORS = ((0.9, 0.25, 0.2), (0.2, 0.45, 0.95))


class ConfigError(ValueError):
    pass


@dataclass
class SceneSpec:
    image_size: int = 64
    channels: int = 3
    min_shapes: int = 1
    max_shapes: int = 6
    n_classes: int = 6
    small_quota: float = 0.3
    large_share: float = 0.3  # share of non-small objects drawn large
    occlusion_prob: float = 0.15
    noise_level: float = 0.04
    seed: int = 0
    small_area_frac: float = 1 / 64
    large_area_frac: float = 1 / 8

    def __post_init__(self):
        if not 0.0 <= self.small_quota <= 1.0:
            raise ConfigError(f"small_quota must lie in [0, 1], got {self.small_quota}")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ConfigError(f"occlusion_prob must lie in [0, 1], got {self.occlusion_prob}")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ConfigError("need 1 <= min_shapes <= max_shapes")
        if self.n_classes != len(SHAPE_KINDS) * len(COLORS):
            raise ConfigError(f"n_classes is fixed at {len(SHAPE_KINDS) * len(COLORS)} (kind x color)")
        if self.image_size < 16 or self.channels != 3:
            raise ConfigError("image_size must be >= 16 and channels == 3")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown scene spec keys: {sorted(unknown)}")
        return cls(**d)

    def size_thresholds(self) -> dict:
        px = self.image_size**2
        return {"small_max_area": px * self.small_area_frac, "large_min_area": px * self.large_area_frac}

    def side_ranges(self) -> dict:
        th = self.size_thresholds()
        small_hi = int(np.ceil(np.sqrt(th["small_max_area"]))) - 1
        large_lo = int(np.floor(np.sqrt(th["large_min_area"]))) + 1
        return {"small": (2, small_hi), "medium": (small_hi + 1, large_lo - 1), "large": (large_lo, self.image_size // 2)}


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, C)
    ids: list[int]
    boxes: list[np.ndarray]
    classes: list[np.ndarray]
    areas: list[np.ndarray]
    header: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx) -> "Dataset":
        idx = list(idx)
        return Dataset(self.images[idx], [self.ids[i] for i in idx], [self.boxes[i] for i in idx],
                       [self.classes[i] for i in idx], [self.areas[i] for i in idx], self.header)


@dataclass
class DatasetSplit:
    fraction: float
    fold: int
    labeled: list[int]
    unlabeled: list[int]


def _render_mask(kind: str, x0: int, y0: int, side: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    u = (xx - x0) / side
    v = (yy - y0) / side
    inside = (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
    if kind == "square":
        return inside
    if kind == "circle":
        return inside & ((u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25 + 1e-9)
    # apex at top-center, base along the bottom edge
    return inside & (np.abs(u - 0.5) <= 0.5 * v + 0.5 / side)


def _box_iou_px(a, b) -> float:
    ix = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def render_image(spec: SceneSpec, image_id: int):
    """Pixels and annotations for one image; depends only on ``(spec, image_id)``."""
    rng = np.random.default_rng([spec.seed, image_id])
    s = spec.image_size
    base = rng.uniform(0.3, 0.55) + rng.normal(0, 0.03, size=3)
    yy, xx = np.mgrid[0:s, 0:s] / s
    grad = rng.uniform(-0.08, 0.08, size=2)
    img = np.ones((s, s, 3)) * base + (grad[0] * xx + grad[1] * yy)[..., None]
    ranges = spec.side_ranges()
    n = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    placed: list[tuple[int, int, int, int]] = []
    boxes, classes, areas = [], [], []
    for _ in range(n):
        r = rng.random()
        tier = "small" if r < spec.small_quota else ("large" if rng.random() < spec.large_share else "medium")
        side = int(rng.integers(ranges[tier][0], ranges[tier][1] + 1))
        kind = int(rng.integers(len(SHAPE_KINDS)))
        color = int(rng.integers(len(COLORS)))
        occlude = bool(placed) and rng.random() < spec.occlusion_prob
        box = None
        for _attempt in range(60):
            if occlude:
                tx0, ty0, tx1, ty1 = placed[int(rng.integers(len(placed)))]
                cx = rng.uniform(tx0, tx1)
                cy = rng.uniform(ty0, ty1)
                x0 = int(np.clip(round(cx - side / 2), 0, s - side))
                y0 = int(np.clip(round(cy - side / 2), 0, s - side))
            else:
                x0 = int(rng.integers(0, s - side + 1))
                y0 = int(rng.integers(0, s - side + 1))
            cand = (x0, y0, x0 + side, y0 + side)
            ious = [_box_iou_px(cand, p) for p in placed]
            worst = max(ious, default=0.0)
            if occlude and 0.0 < worst <= 0.5:
                box = cand
                break
            if not occlude and worst == 0.0:
                box = cand
                break
        if box is None:
            continue
        mask = _render_mask(SHAPE_KINDS[kind], box[0], box[1], side, s)
        col = np.clip(np.array(COLORS[color]) + rng.normal(0, 0.05, size=3), 0, 1)
        img[mask] = col
        placed.append(box)
        boxes.append([(box[0] + box[2]) / (2 * s), (box[1] + box[3]) / (2 * s), side / s, side / s])
        classes.append(kind * len(COLORS) + color)
        areas.append(float(side * side))
    img = img + rng.normal(0, spec.noise_level, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return img, np.array(boxes, dtype=float).reshape(-1, 4), np.array(classes, dtype=int), np.array(areas, dtype=float)


def make_header(spec: SceneSpec, splits: dict) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "spec": asdict(spec),
        "seed": spec.seed,
        "thresholds": spec.size_thresholds(),
        "image_shape": [spec.image_size, spec.image_size, spec.channels],
        "n_classes": spec.n_classes,
        "class_names": [f"{c}_{k}" for k in SHAPE_KINDS for c in ("red", "blue")],
        "splits": splits,
    }


def write_blob(path: Path, images: np.ndarray) -> None:
    images = np.ascontiguousarray(images, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(BLOB_MAGIC)
        fh.write(struct.pack("<4Q", *images.shape))
        fh.write(images.tobytes())


def read_blob(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != BLOB_MAGIC:
            raise ValueError(f"{path}: not an image blob")
        shape = struct.unpack("<4Q", fh.read(32))
    return np.memmap(path, dtype="<f8", mode="r", offset=40, shape=shape)


def generate(spec: SceneSpec, n_images: int, out_dir, n_test: int = 0) -> dict:
    """Render ``n_images`` train (ids 0..n-1) and ``n_test`` test images into ``out_dir``."""
    if n_images < 1:
        raise ConfigError("n_images must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = {"train": [0, n_images]}
    if n_test:
        splits["test"] = [n_images, n_images + n_test]
    for name, (lo, hi) in splits.items():
        images = np.empty((hi - lo, spec.image_size, spec.image_size, spec.channels))
        with open(out / f"{name}.jsonl", "w") as fh:
            for k, image_id in enumerate(range(lo, hi)):
                img, boxes, classes, areas = render_image(spec, image_id)
                images[k] = img
                fh.write(json.dumps({"id": image_id, "boxes": boxes.tolist(), "classes": classes.tolist(),
                                     "areas": areas.tolist()}) + "\n")
        write_blob(out / f"{name}.bin", images)
    header = make_header(spec, {k: v[1] - v[0] for k, v in splits.items()})
    (out / "header.json").write_text(json.dumps(header, indent=2, sort_keys=True))
    return header


def load(data_dir, split: str = "train") -> Dataset:
    d = Path(data_dir)
    header = json.loads((d / "header.json").read_text())
    images = read_blob(d / f"{split}.bin")
    ids, boxes, classes, areas = [], [], [], []
    with open(d / f"{split}.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            ids.append(rec["id"])
            boxes.append(np.array(rec["boxes"], dtype=float).reshape(-1, 4))
            classes.append(np.array(rec["classes"], dtype=int))
            areas.append(np.array(rec["areas"], dtype=float))
    return Dataset(np.asarray(images), ids, boxes, classes, areas, header)


def dataset_hash(data_dir) -> str:
    """Content hash over the header and every split file, in sorted name order."""
    d = Path(data_dir)
    h = hashlib.sha256()
    for p in sorted(d.iterdir()):
        if p.suffix in (".json", ".jsonl", ".bin"):
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def split(ids, fraction: float, fold: int = 0, seed: int = 0) -> DatasetSplit:
    """Uniform labeled/unlabeled partition, reproducible under ``(seed, fold)``."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    ids = list(ids)
    n_labeled = int(round(fraction * len(ids)))
    if n_labeled == 0:
        raise ConfigError(f"fraction {fraction} of {len(ids)} images leaves no labeled data")
    perm = np.random.default_rng([seed, fold, 7919]).permutation(len(ids))
    labeled = sorted(ids[i] for i in perm[:n_labeled])
    unlabeled = sorted(ids[i] for i in perm[n_labeled:])
    return DatasetSplit(fraction, fold, labeled, unlabeled)
