"""Reliable pseudo-label filtering.

Teacher outputs are thresholded, the survivors are copied into ``m`` jittered
groups, each group is matched one-to-one against the student predictions, and
the pooled candidates decide which pseudo boxes are kept.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .assignment import MatchCostWeights, cost_matrix, hungarian
from .detector import Predictions
from .geometry import AffineTransform, boxes_array, clip_boxes, pairwise_iou, transform_boxes, valid_mask


@dataclass
class PseudoLabelSet:
    boxes: np.ndarray
    classes: np.ndarray
    scores: np.ndarray
    transform: AffineTransform = field(default_factory=AffineTransform.identity)
    iteration: int = -1
    source: np.ndarray | None = None  # teacher query index of each pseudo box

    def __post_init__(self):
        self.boxes = boxes_array(self.boxes)
        self.classes = np.asarray(self.classes, dtype=int).reshape(-1)
        self.scores = np.asarray(self.scores, dtype=float).reshape(-1)
        if self.source is None:
            self.source = np.arange(len(self.boxes))

    def __len__(self) -> int:
        return len(self.boxes)

    def take(self, idx) -> "PseudoLabelSet":
        idx = np.asarray(idx, dtype=int)
        return replace(self, boxes=self.boxes[idx], classes=self.classes[idx], scores=self.scores[idx],
                       source=self.source[idx])

    def in_student_frame(self) -> tuple["PseudoLabelSet", np.ndarray]:
        """Map boxes through ``transform``; drops boxes that degenerate. Returns the kept indices too."""
        if len(self) == 0:
            return replace(self, transform=AffineTransform.identity()), np.zeros(0, dtype=int)
        mapped = transform_boxes(self.boxes, self.transform)
        keep = np.flatnonzero(valid_mask(mapped) & (mapped[:, 2] > 1e-3) & (mapped[:, 3] > 1e-3))
        out = self.take(keep)
        out.boxes = mapped[keep]
        out.transform = AffineTransform.identity()
        return out, keep


@dataclass
class AugmentedGroups:
    groups: list[np.ndarray]
    classes: np.ndarray
    center_noise: float
    scale_range: tuple
    seed: int | None = None

    @property
    def m(self) -> int:
        return len(self.groups)


@dataclass
class Candidate:
    group: int
    pred: int
    cost: float
    box: np.ndarray


@dataclass
class SelectionReport:
    kept: np.ndarray
    unreliable: np.ndarray
    duplicates: np.ndarray
    topk: list = field(default_factory=list)
    support: list = field(default_factory=list)


def filter_by_confidence(preds: Predictions, sigma: float, iteration: int = -1,
                         transform: AffineTransform | None = None) -> PseudoLabelSet:
    """Keep queries whose best foreground probability is >= ``sigma`` and beats background."""
    if not 0.0 < sigma < 1.0:
        raise ValueError(f"sigma must lie in (0, 1), got {sigma}")
    probs = np.asarray(preds.class_probs)
    fg = probs[:, :-1]
    scores = fg.max(axis=1) if len(fg) else np.zeros(0)
    labels = fg.argmax(axis=1) if len(fg) else np.zeros(0, dtype=int)
    background_wins = probs.argmax(axis=1) == probs.shape[1] - 1 if len(fg) else np.zeros(0, dtype=bool)
    keep = np.flatnonzero((scores >= sigma) & ~background_wins)
    return PseudoLabelSet(np.asarray(preds.boxes)[keep], labels[keep], scores[keep],
                          transform or AffineTransform.identity(), iteration, keep)


def make_augmented_groups(p: PseudoLabelSet, m: int, rng: np.random.Generator, center_noise: float = 0.1,
                          scale_range: tuple = (0.8, 1.25)) -> AugmentedGroups:
    """``m`` jittered copies of the pseudo boxes (center shift relative to size, per-side scaling)."""
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    n = len(p)
    groups = []
    for _ in range(m):
        shift = rng.uniform(-center_noise, center_noise, size=(n, 2)) if center_noise > 0 else np.zeros((n, 2))
        lo, hi = scale_range
        scale = rng.uniform(lo, hi, size=(n, 2)) if hi > lo else np.full((n, 2), lo)
        b = p.boxes.copy()
        b[:, :2] += shift * p.boxes[:, 2:]
        b[:, 2:] *= scale
        groups.append(clip_boxes(b))
    return AugmentedGroups(groups, p.classes.copy(), center_noise, tuple(scale_range))


def match_groups(student_preds: Predictions, groups: AugmentedGroups,
                 w: MatchCostWeights = MatchCostWeights()) -> list[list[Candidate]]:
    """Hungarian-match every group to the predictions; pool per pseudo box.

    The same prediction matched to a box by several groups counts once, at its
    lowest cost.
    """
    n = len(groups.classes)
    pooled: list[dict[int, Candidate]] = [dict() for _ in range(n)]
    if n == 0 or len(student_preds) == 0:
        return [[] for _ in range(n)]
    for g, gboxes in enumerate(groups.groups):
        cost = cost_matrix(student_preds.class_probs, student_preds.boxes, groups.classes, gboxes, w)
        for t, q in hungarian(cost).pairs:
            c = float(cost[t, q])
            prev = pooled[t].get(q)
            if prev is None or c < prev.cost:
                pooled[t][q] = Candidate(g, q, c, np.asarray(student_preds.boxes[q], dtype=float))
    return [sorted(d.values(), key=lambda c: (c.cost, c.pred)) for d in pooled]


def select_reliable(candidates: list[list[Candidate]], pseudo: PseudoLabelSet, k: int, m: int | None = None,
                    tau_support: float = 0.5, tau_dup: float = 0.7, class_agnostic: bool = False,
                    support_evidence: bool = True) -> tuple[PseudoLabelSet, SelectionReport]:
    """Top-k consensus check per pseudo box, then score-ordered duplicate suppression.

    The candidates beyond the top ``k`` form the support pool; a support box that
    overlaps two retained boxes above ``tau_dup`` marks the lower-scoring one as a
    duplicate.
    """
    if m is not None and k > m:
        raise ValueError(f"k={k} must not exceed m={m}")
    n = len(pseudo)
    topk = [c[:k] for c in candidates]
    support = [c[k:] for c in candidates]
    reliable = np.zeros(n, dtype=bool)
    for j in range(n):
        if not topk[j]:
            continue
        ious = pairwise_iou(np.stack([c.box for c in topk[j]]), pseudo.boxes[j:j + 1])[:, 0]
        reliable[j] = ious.mean() >= tau_support
    order = sorted(np.flatnonzero(reliable), key=lambda j: (-pseudo.scores[j], j))
    ious = pairwise_iou(pseudo.boxes, pseudo.boxes) if n else np.zeros((0, 0))
    kept: list[int] = []
    dups: list[int] = []
    for j in order:
        duplicate = False
        for i in kept:
            if not class_agnostic and pseudo.classes[i] != pseudo.classes[j]:
                continue
            if ious[i, j] > tau_dup:
                duplicate = True
            elif support_evidence:
                pool = support[i] + support[j]
                if pool:
                    sb = np.stack([c.box for c in pool])
                    ov = pairwise_iou(sb, pseudo.boxes[[i, j]])
                    duplicate = bool(np.any((ov[:, 0] > tau_dup) & (ov[:, 1] > tau_dup)))
            if duplicate:
                break
        (dups if duplicate else kept).append(j)
    kept_arr = np.array(sorted(kept), dtype=int)
    report = SelectionReport(kept_arr, np.flatnonzero(~reliable), np.array(sorted(dups), dtype=int), topk, support)
    return pseudo.take(kept_arr), report


def reliable_pseudo_labels(student_preds: Predictions, pseudo: PseudoLabelSet, m: int, k: int,
                           rng: np.random.Generator, w: MatchCostWeights = MatchCostWeights(),
                           tau_support: float = 0.5, tau_dup: float = 0.7, **jitter) -> tuple[PseudoLabelSet, SelectionReport]:
    groups = make_augmented_groups(pseudo, m, rng, **jitter)
    cands = match_groups(student_preds, groups, w)
    return select_reliable(cands, pseudo, k, m, tau_support, tau_dup)
