"""Query refinement: refined teacher-side queries and student-side concatenated queries.

Shapes carry an optional leading batch axis; ``W1`` is the (padded) pseudo-box
count and ``W2`` the number of backbone tokens.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .detector import MASK_FILL, Detector, cell_boxes, query_group_mask, roi_align
from .numerics import Tensor, concat, linear, matmul, softmax, where

WEAK, STRONG = "weak", "strong"
PLACEMENTS = ("none", "both", "high", "low")

_attention_trace: list | None = None


@contextlib.contextmanager
def trace_attention():
    """Record the view tag of every :func:`attention_block` call inside the block."""
    global _attention_trace
    prev, _attention_trace = _attention_trace, []
    try:
        yield _attention_trace
    finally:
        _attention_trace = prev


@dataclass(frozen=True)
class RefineConfig:
    similarity: bool = True
    attention_placement: str = "low"
    temperature: float = 0.1
    similarity_mode: str = "soft"  # or "argmax" (temperature -> 0 limit)
    refine_strong: bool = False
    max_pseudo: int = 8

    def __post_init__(self):
        if self.attention_placement not in PLACEMENTS:
            raise ValueError(f"attention_placement must be one of {PLACEMENTS}")
        if self.similarity_mode not in ("soft", "argmax"):
            raise ValueError("similarity_mode must be 'soft' or 'argmax'")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class RefinedQueries:
    tokens: Tensor           # (B, R, refine_channels), pre-projection
    valid: np.ndarray        # (B, R) bool
    box_index: np.ndarray    # (R,) pseudo-box slot per token, -1 for backbone tokens
    ref_boxes: np.ndarray    # (B, R, 4) reference boxes in the consuming view's frame

    @property
    def count(self) -> int:
        return self.tokens.shape[1]


@dataclass
class QueryFeatures:
    high_res: Tensor     # F1, (B, W1, d): RoI features of pseudo boxes
    low_res: Tensor      # F2, (B, W2, d): backbone tokens
    valid: np.ndarray    # (B, W1)
    boxes: np.ndarray    # (B, W1, 4) pseudo boxes in this view's frame
    view_tag: str

    def __post_init__(self):
        if self.high_res.shape[1] > self.low_res.shape[1]:
            raise ValueError("high-res token count must not exceed low-res token count")


def reduce_channels(det: Detector, F: Tensor) -> Tensor:
    """Learned linear map of the trailing model width down to ``refine_channels``."""
    return linear(F, det["qr.reduce_w"], det["qr.reduce_b"])


def attention_block(det: Detector, F: Tensor, key_valid: np.ndarray | None = None, view_tag: str = WEAK,
                    return_weights: bool = False):
    """Single-head attention over the token axis: softmax(F_q F_k^T) F_v."""
    if _attention_trace is not None:
        _attention_trace.append(view_tag)
    fq = linear(F, det["qr.att_q_w"], det["qr.att_q_b"])
    fk = linear(F, det["qr.att_k_w"], det["qr.att_k_b"])
    fv = linear(F, det["qr.att_v_w"], det["qr.att_v_b"])
    scores = matmul(fq, fk.swapaxes(-1, -2))
    if key_valid is not None:
        blocked = ~np.asarray(key_valid, dtype=bool)[..., None, :]
        n = scores.shape[-1]
        blocked = blocked & ~np.eye(n, dtype=bool)
        scores = where(np.broadcast_to(blocked, scores.shape), Tensor(MASK_FILL), scores)
    weights = softmax(scores, axis=-1)
    out = matmul(weights, fv)
    return (out, weights) if return_weights else out


def _unit_rows(x: Tensor) -> Tensor:
    sq = (x * x).sum(axis=-1, keepdims=True)
    zero = (sq.data == 0).astype(float)
    return x / (sq + Tensor(zero)).sqrt()


def cosine_matrix(P: Tensor, Q: Tensor) -> Tensor:
    """Pairwise cosine similarity ``(W1, W2)``; pairs with a zero-norm row score 0."""
    return matmul(_unit_rows(P), _unit_rows(Q).swapaxes(-1, -2))


def cross_similarity(P: Tensor, Q: Tensor, temperature: float = 0.1, mode: str = "soft") -> Tensor:
    """Each high-res row gathers attentional low-res rows weighted by softmax(cos / temperature)."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    S = cosine_matrix(P, Q)
    if mode == "argmax":
        onehot = np.zeros(S.shape)
        np.put_along_axis(onehot, S.data.argmax(axis=-1)[..., None], 1.0, axis=-1)
        return matmul(Tensor(onehot), Q)
    return matmul(softmax(S * (1.0 / temperature), axis=-1), Q)


def extract_features(det: Detector, tokens: Tensor, boxes: np.ndarray, valid: np.ndarray, view_tag: str) -> QueryFeatures:
    """RoI features of the (padded) pseudo boxes plus the backbone tokens of one view."""
    B, cap = valid.shape
    s = det.cfg.roi_size
    rows = []
    for b in range(B):
        grid = det.feature_grid(tokens, b)
        rows.append(roi_align(grid, boxes[b], s).reshape(1, cap, s * s * det.cfg.d_model))
    pooled = concat(rows, axis=0)
    F1 = linear(pooled, det["qr.roi_w"], det["qr.roi_b"])
    return QueryFeatures(F1, tokens, valid, boxes, view_tag)


def build_teacher_refined(det: Detector, feats: QueryFeatures, cfg: RefineConfig = RefineConfig(),
                          ref_boxes: np.ndarray | None = None) -> RefinedQueries:
    """Refined queries from weak-view features: ``[similarity(P, attn(F2')) ; P]``.

    Without the similarity step the group is ``[P ; attn(F2')]`` (``W1 + W2`` tokens).
    """
    if feats.view_tag != WEAK and not cfg.refine_strong:
        raise ValueError("refinement of strong-view features is disabled by the placement config")
    B, W1 = feats.valid.shape
    W2 = feats.low_res.shape[1]
    ref_boxes = feats.boxes if ref_boxes is None else ref_boxes
    if W1 == 0:
        return RefinedQueries(Tensor(np.zeros((B, 0, det.cfg.refine_channels))), np.zeros((B, 0), bool),
                              np.zeros(0, int), np.zeros((B, 0, 4)))
    P = reduce_channels(det, feats.high_res)
    F2 = reduce_channels(det, feats.low_res)
    place = cfg.attention_placement
    Q = attention_block(det, F2, view_tag=feats.view_tag) if place in ("low", "both") else F2
    if place in ("high", "both"):
        P = attention_block(det, P, key_valid=feats.valid, view_tag=feats.view_tag)
    if cfg.similarity:
        cs = cross_similarity(P, Q, cfg.temperature, cfg.similarity_mode)
        tokens = concat([cs, P], axis=1)
        box_index = np.r_[np.arange(W1), np.arange(W1)]
        valid = np.concatenate([feats.valid, feats.valid], axis=1)
        refs = np.concatenate([ref_boxes, ref_boxes], axis=1)
    else:
        tokens = concat([P, Q], axis=1)
        box_index = np.r_[np.arange(W1), -np.ones(W2, dtype=int)]
        valid = np.concatenate([feats.valid, np.ones((B, W2), dtype=bool)], axis=1)
        cells = np.broadcast_to(cell_boxes(det.cfg.grid), (B, W2, 4))
        refs = np.concatenate([ref_boxes, cells], axis=1)
    return RefinedQueries(tokens, valid, box_index, refs)


def build_student_concat(det: Detector, feats: QueryFeatures, cfg: RefineConfig = RefineConfig(),
                         ref_boxes: np.ndarray | None = None) -> RefinedQueries:
    """Strong-view queries: channel-reduced ``[F1 ; F2]`` (``W1 + W2`` tokens), no attention."""
    if cfg.refine_strong:
        return build_teacher_refined(det, feats, cfg, ref_boxes)
    B, W1 = feats.valid.shape
    W2 = feats.low_res.shape[1]
    ref_boxes = feats.boxes if ref_boxes is None else ref_boxes
    tokens = concat([reduce_channels(det, feats.high_res), reduce_channels(det, feats.low_res)], axis=1)
    box_index = np.r_[np.arange(W1), -np.ones(W2, dtype=int)]
    valid = np.concatenate([feats.valid, np.ones((B, W2), dtype=bool)], axis=1)
    cells = np.broadcast_to(cell_boxes(det.cfg.grid), (B, W2, 4))
    return RefinedQueries(tokens, valid, box_index, np.concatenate([ref_boxes, cells], axis=1))


def project(det: Detector, r: RefinedQueries) -> Tensor:
    """Lift refined tokens to decoder width."""
    return linear(r.tokens, det["qr.proj_w"], det["qr.proj_b"])


@dataclass
class DecoderInputs:
    refined: RefinedQueries
    mask: np.ndarray  # (B, R + Q, R + Q), True = blocked


@dataclass
class CrossViewRouting:
    teacher: DecoderInputs   # teacher decoder receives [r_s, q_t]
    student: DecoderInputs   # student decoder receives [r_t, q_s]


def route_cross_view(r_t: RefinedQueries, r_s: RefinedQueries, n_original: int) -> CrossViewRouting:
    """Swap refined groups across views and build the group masks."""
    return CrossViewRouting(
        teacher=DecoderInputs(r_s, query_group_mask(r_s.count, n_original, r_s.valid)),
        student=DecoderInputs(r_t, query_group_mask(r_t.count, n_original, r_t.valid)),
    )


def pool_by_box(decoded: Tensor, r: RefinedQueries, n_boxes: int) -> Tensor:
    """Average decoded refined rows per pseudo-box slot -> ``(B, n_boxes, d)``."""
    B, R = r.valid.shape
    pool = np.zeros((B, n_boxes, R))
    for j, slot in enumerate(r.box_index):
        if slot >= 0:
            pool[:, slot, j] = r.valid[:, j]
    counts = pool.sum(axis=-1, keepdims=True)
    pool = pool / np.where(counts > 0, counts, 1.0)
    return matmul(Tensor(pool), decoded)
