"""Miniature DETR-style detector built on :mod:`ssdlab.numerics`.

The decoder consumes two query groups, ``[refined, original]``. A group mask
blocks attention between them in both directions, so the original-query
outputs never depend on the refined inputs.
"""
from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Tensor, ShapeError, concat, layer_norm, linear, matmul, parameter, softmax, where
from .geometry import clip_boxes

CKPT_MAGIC = b"SSDCKPT1"
MASK_FILL = -1e9
ORIGINAL, REFINED = "original", "refined"


@dataclass(frozen=True)
class DetectorConfig:
    image_size: int = 64
    channels: int = 3
    patch_size: int = 8
    d_model: int = 32
    n_heads: int = 2
    n_decoder_layers: int = 2
    n_queries: int = 30
    n_classes: int = 6
    ffn_dim: int = 64
    enc_hidden: int = 64
    roi_size: int = 2
    refine_channels: int = 16
    init_box_size: float = 0.2
    spatial_prior: float = 0.5  # cross-attention Gaussian width relative to box size; 0 disables
    iterative_refinement: bool = True

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.d_model % 8:
            raise ValueError("d_model must be a multiple of 8 (box positional encoding)")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_tokens(self) -> int:
        return self.grid**2

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Predictions:
    """Per-image query outputs; ``class_probs`` has a trailing background column."""

    class_probs: np.ndarray
    boxes: np.ndarray
    group_tags: list = field(default_factory=list)

    def __post_init__(self):
        self.class_probs = np.asarray(self.class_probs, dtype=float)
        self.boxes = clip_boxes(np.asarray(self.boxes, dtype=float).reshape(-1, 4))
        if not self.group_tags:
            self.group_tags = [ORIGINAL] * len(self.boxes)

    @property
    def scores(self) -> np.ndarray:
        return self.class_probs[:, :-1].max(axis=1)

    @property
    def labels(self) -> np.ndarray:
        return self.class_probs[:, :-1].argmax(axis=1)

    def __len__(self) -> int:
        return len(self.boxes)


@dataclass
class DecodeOutput:
    hidden: Tensor       # (B, R + Q, d)
    logits: Tensor       # (B, R + Q, C + 1)
    boxes: Tensor        # (B, R + Q, 4)
    n_refined: int
    aux: list = field(default_factory=list)  # (logits, boxes) of earlier layers

    @property
    def decoded_refined(self) -> Tensor:
        return self.hidden[:, : self.n_refined]

    @property
    def decoded_original(self) -> Tensor:
        return self.hidden[:, self.n_refined:]

    @property
    def original_logits(self) -> Tensor:
        return self.logits[:, self.n_refined:]

    @property
    def original_boxes(self) -> Tensor:
        return self.boxes[:, self.n_refined:]

    def predictions(self, group: str = ORIGINAL) -> list[Predictions]:
        sl = slice(self.n_refined, None) if group == ORIGINAL else slice(0, self.n_refined)
        probs = softmax(self.logits[:, sl], axis=-1).data
        boxes = self.boxes.data[:, sl]
        return [Predictions(probs[b], boxes[b], [group] * boxes.shape[1]) for b in range(probs.shape[0])]


def query_group_mask(n_refined: int, n_original: int, refined_valid: np.ndarray | None = None) -> np.ndarray:
    """Boolean ``(R+Q, R+Q)`` mask, True = blocked; batched ``(B, R+Q, R+Q)`` if validity is given."""
    group = np.r_[np.zeros(n_refined, dtype=int), np.ones(n_original, dtype=int)]
    blocked = group[:, None] != group[None, :]
    if refined_valid is None:
        return blocked
    refined_valid = np.asarray(refined_valid, dtype=bool).reshape(-1, n_refined)
    valid = np.concatenate([refined_valid, np.ones((len(refined_valid), n_original), dtype=bool)], axis=1)
    out = blocked[None] | ~valid[:, None, :]
    idx = np.arange(n_refined + n_original)
    out[:, idx, idx] = False  # padded tokens still see themselves
    return out


def sine_position_encoding(n_side: int, d: int) -> np.ndarray:
    """Fixed 2-D sinusoidal encoding for an ``n_side x n_side`` token grid, row-major."""
    centers = (np.arange(n_side) + 0.5) / n_side
    cx, cy = np.meshgrid(centers, centers)
    boxes = np.stack([cx.ravel(), cy.ravel(), np.full(cx.size, 1 / n_side), np.full(cx.size, 1 / n_side)], -1)
    return box_sine_embedding(boxes, d)


def box_sine_embedding(boxes: np.ndarray, d: int) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=float)
    n_freq = d // 8
    freqs = np.pi * 2.0 ** np.arange(n_freq)
    ang = boxes[..., :, None] * freqs  # (..., 4, F)
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    return emb.reshape(*boxes.shape[:-1], 4 * 2 * n_freq)


def inverse_sigmoid(x, eps: float = 1e-4) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=float), eps, 1 - eps)
    return np.log(x / (1 - x))


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    b, h, w, c = images.shape
    g_h, g_w = h // patch, w // patch
    x = images.reshape(b, g_h, patch, g_w, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g_h * g_w, patch * patch * c)


def cell_boxes(grid: int) -> np.ndarray:
    centers = (np.arange(grid) + 0.5) / grid
    cx, cy = np.meshgrid(centers, centers)
    return np.stack([cx.ravel(), cy.ravel(), np.full(cx.size, 1 / grid), np.full(cx.size, 1 / grid)], -1)


def roi_align_weights(grid_h: int, grid_w: int, boxes: np.ndarray, s: int) -> np.ndarray:
    """Interpolation matrix ``(n * s * s, grid_h * grid_w)`` of bilinear sample weights.

    Sample points are the centers of an ``s x s`` subdivision of each box; cell
    ``(r, c)`` of the grid sits at normalized position ``((c+.5)/W, (r+.5)/H)``.
    """
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    n = len(boxes)
    frac = (np.arange(s) + 0.5) / s - 0.5
    xs = boxes[:, 0:1] + frac[None, :] * boxes[:, 2:3]  # (n, s)
    ys = boxes[:, 1:2] + frac[None, :] * boxes[:, 3:4]
    px = np.broadcast_to(xs[:, None, :], (n, s, s)).reshape(-1) * grid_w - 0.5
    py = np.broadcast_to(ys[:, :, None], (n, s, s)).reshape(-1) * grid_h - 0.5
    px = np.clip(px, 0, grid_w - 1)
    py = np.clip(py, 0, grid_h - 1)
    x0 = np.floor(px).astype(int)
    y0 = np.floor(py).astype(int)
    x1 = np.minimum(x0 + 1, grid_w - 1)
    y1 = np.minimum(y0 + 1, grid_h - 1)
    fx = px - x0
    fy = py - y0
    W = np.zeros((n * s * s, grid_h * grid_w))
    rows = np.arange(n * s * s)
    np.add.at(W, (rows, y0 * grid_w + x0), (1 - fx) * (1 - fy))
    np.add.at(W, (rows, y0 * grid_w + x1), fx * (1 - fy))
    np.add.at(W, (rows, y1 * grid_w + x0), (1 - fx) * fy)
    np.add.at(W, (rows, y1 * grid_w + x1), fx * fy)
    return W


def roi_align(feature_grid: Tensor, boxes, output_size: int) -> Tensor:
    """Bilinear ``s x s`` samples per box from an ``(h, w, d)`` grid -> ``(n, s*s*d)``."""
    h, w, d = feature_grid.shape
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    W = roi_align_weights(h, w, boxes, output_size)
    sampled = matmul(Tensor(W), feature_grid.reshape(h * w, d))
    return sampled.reshape(len(boxes), output_size * output_size * d)


def init_params(cfg: DetectorConfig, seed: int = 0) -> "OrderedDict[str, Tensor]":
    rng = np.random.default_rng(seed)
    d, f, c = cfg.d_model, cfg.ffn_dim, cfg.refine_channels

    def glorot(n_in, n_out, gain=1.0):
        return rng.normal(0.0, gain * np.sqrt(2.0 / (n_in + n_out)), size=(n_in, n_out))

    p: "OrderedDict[str, np.ndarray]" = OrderedDict()
    patch_dim = cfg.patch_size**2 * cfg.channels
    p["enc.w1"] = glorot(patch_dim, cfg.enc_hidden, np.sqrt(2))
    p["enc.b1"] = np.zeros(cfg.enc_hidden)
    p["enc.w2"] = glorot(cfg.enc_hidden, d)
    p["enc.b2"] = np.zeros(d)
    p["query.content"] = rng.normal(0, 0.5, size=(cfg.n_queries, d))
    side = int(np.ceil(np.sqrt(cfg.n_queries)))
    centers = (np.arange(side) + 0.5) / side
    cx, cy = np.meshgrid(centers, centers)
    ref = np.stack([cx.ravel(), cy.ravel(), np.full(cx.size, cfg.init_box_size), np.full(cx.size, cfg.init_box_size)], -1)
    p["query.ref"] = inverse_sigmoid(ref[: cfg.n_queries])
    p["pos.w"] = glorot(d, d)
    p["pos.b"] = np.zeros(d)
    for layer in range(cfg.n_decoder_layers):
        pre = f"dec{layer}."
        for blk in ("sa", "ca"):
            p[pre + blk + ".ln_g"] = np.ones(d)
            p[pre + blk + ".ln_b"] = np.zeros(d)
            for nm in ("wq", "wk", "wv", "wo"):
                p[pre + blk + "." + nm] = glorot(d, d)
            p[pre + blk + ".bo"] = np.zeros(d)
        p[pre + "ffn.ln_g"] = np.ones(d)
        p[pre + "ffn.ln_b"] = np.zeros(d)
        p[pre + "ffn.w1"] = glorot(d, f, np.sqrt(2))
        p[pre + "ffn.b1"] = np.zeros(f)
        p[pre + "ffn.w2"] = glorot(f, d)
        p[pre + "ffn.b2"] = np.zeros(d)
    p["head.ln_g"] = np.ones(d)
    p["head.ln_b"] = np.zeros(d)
    # near-zero class weights: an untrained teacher must not clear the pseudo-label threshold
    p["head.cls_w"] = glorot(d, cfg.n_classes + 1, 0.01)
    cls_b = np.zeros(cfg.n_classes + 1)
    cls_b[-1] = 2.0  # start out predicting background
    p["head.cls_b"] = cls_b
    p["head.box_w1"] = glorot(d, d, np.sqrt(2))
    p["head.box_b1"] = np.zeros(d)
    p["head.box_w2"] = np.zeros((d, 4))
    p["head.box_b2"] = np.zeros(4)
    # query refinement (student-owned)
    p["qr.roi_w"] = glorot(cfg.roi_size**2 * d, d)
    p["qr.roi_b"] = np.zeros(d)
    p["qr.reduce_w"] = glorot(d, c)
    p["qr.reduce_b"] = np.zeros(c)
    for nm in ("att_q", "att_k", "att_v"):
        p[f"qr.{nm}_w"] = glorot(c, c)
        p[f"qr.{nm}_b"] = np.zeros(c)
    p["qr.proj_w"] = glorot(c, d)
    p["qr.proj_b"] = np.zeros(d)
    return OrderedDict((k, parameter(v)) for k, v in p.items())


class Detector:
    """Parameters plus forward functions. Not thread-safe during a pass."""

    def __init__(self, cfg: DetectorConfig, params=None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)
        self.pos = sine_position_encoding(cfg.grid, cfg.d_model)
        self._cells = cell_boxes(cfg.grid)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    # -- encoder ---------------------------------------------------------------------
    def encode(self, images: np.ndarray) -> Tensor:
        """``(B, H, W, C)`` images -> ``(B, n_tokens, d_model)`` tokens."""
        images = np.asarray(images, dtype=float)
        cfg = self.cfg
        if images.ndim == 3:
            images = images[None]
        if images.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
            raise ShapeError(f"encode: expected images of shape (B, {cfg.image_size}, {cfg.image_size}, {cfg.channels}), got {images.shape}")
        x = Tensor(patchify(images, cfg.patch_size) - 0.5)
        h = linear(x, self["enc.w1"], self["enc.b1"]).relu()
        return linear(h, self["enc.w2"], self["enc.b2"]) + Tensor(self.pos)

    def feature_grid(self, tokens: Tensor, b: int) -> Tensor:
        g = self.cfg.grid
        return tokens[b].reshape(g, g, self.cfg.d_model)

    # -- decoder ---------------------------------------------------------------------
    def _attention(self, pre: str, q_in: Tensor, k_in: Tensor, v_in: Tensor, blocked: np.ndarray | None,
                   bias: np.ndarray | None = None) -> Tensor:
        cfg = self.cfg
        h, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
        B, Nq, _ = q_in.shape
        Nk = k_in.shape[1]

        def split(x: Tensor, n: int) -> Tensor:
            return x.reshape(B, n, h, dh).transpose((0, 2, 1, 3))

        q = split(matmul(q_in, self[pre + ".wq"]), Nq)
        k = split(matmul(k_in, self[pre + ".wk"]), Nk)
        v = split(matmul(v_in, self[pre + ".wv"]), Nk)
        scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
        if bias is not None:
            scores = scores + Tensor(bias[:, None])
        if blocked is not None:
            blocked = np.broadcast_to(blocked.reshape(-1, 1, Nq, Nk) if blocked.ndim == 3 else blocked, scores.shape)
            scores = where(blocked, Tensor(MASK_FILL), scores)
        attn = softmax(scores, axis=-1)
        out = matmul(attn, v).transpose((0, 2, 1, 3)).reshape(B, Nq, cfg.d_model)
        return linear(out, self[pre + ".wo"], self[pre + ".bo"])

    def query_pos(self, ref_boxes: np.ndarray) -> Tensor:
        return linear(Tensor(box_sine_embedding(ref_boxes, self.cfg.d_model)), self["pos.w"], self["pos.b"])

    def original_queries(self, batch: int) -> tuple[Tensor, np.ndarray]:
        content = self["query.content"]
        ref = 1.0 / (1.0 + np.exp(-self["query.ref"].data))
        return content, np.broadcast_to(ref, (batch,) + ref.shape)

    def decode(self, memory: Tensor, refined: Tensor | None = None, refined_ref: np.ndarray | None = None,
               refined_valid: np.ndarray | None = None, include_original: bool = True) -> DecodeOutput:
        """Decode ``[refined, original]`` query groups against encoder tokens.

        ``refined`` is ``(B, R, d_model)`` with reference boxes ``refined_ref``
        ``(B, R, 4)``; pass ``None`` for a plain pass over the original queries.
        With ``include_original=False`` only the refined group is decoded; the
        group mask makes this equal to the refined rows of a joint pass.
        """
        cfg = self.cfg
        B = memory.shape[0]
        content, orig_ref = self.original_queries(B)
        Q = cfg.n_queries
        orig = content.reshape(1, Q, cfg.d_model) + Tensor(np.zeros((B, 1, 1)))
        ref_logit_orig = self["query.ref"].reshape(1, Q, 4) + Tensor(np.zeros((B, 1, 1)))
        R = 0 if refined is None else refined.shape[1]
        if R:
            if refined.shape[0] != B or refined.shape[2] != cfg.d_model:
                raise ShapeError(f"decode: refined queries {refined.shape} incompatible with batch {B}, d_model {cfg.d_model}")
        if R and not include_original:
            x = refined
            ref = np.asarray(refined_ref, dtype=float).reshape(B, R, 4)
            ref_logit = Tensor(inverse_sigmoid(ref))
            valid = np.ones((B, R), dtype=bool) if refined_valid is None else np.asarray(refined_valid, dtype=bool)
            blocked = ~valid[:, None, :] & ~np.eye(R, dtype=bool)[None]
        elif R:
            x = concat([refined, orig], axis=1)
            ref = np.concatenate([np.asarray(refined_ref, dtype=float).reshape(B, R, 4), orig_ref], axis=1)
            ref_logit = concat([Tensor(inverse_sigmoid(refined_ref).reshape(B, R, 4)), ref_logit_orig], axis=1)
            valid = np.ones((B, R), dtype=bool) if refined_valid is None else refined_valid
            blocked = query_group_mask(R, Q, valid)
        else:
            x, ref, ref_logit, blocked = orig, orig_ref, ref_logit_orig, None
        aux = []
        cur_logit = ref_logit
        for layer in range(cfg.n_decoder_layers):
            pre = f"dec{layer}."
            qpos = self.query_pos(ref)
            y = layer_norm(x, self[pre + "sa.ln_g"], self[pre + "sa.ln_b"])
            x = x + self._attention(pre + "sa", y + qpos, y + qpos, y, blocked)
            y = layer_norm(x, self[pre + "ca.ln_g"], self[pre + "ca.ln_b"])
            x = x + self._attention(pre + "ca", y + qpos, memory, memory, None, self.spatial_bias(ref))
            y = layer_norm(x, self[pre + "ffn.ln_g"], self[pre + "ffn.ln_b"])
            x = x + linear(linear(y, self[pre + "ffn.w1"], self[pre + "ffn.b1"]).relu(), self[pre + "ffn.w2"], self[pre + "ffn.b2"])
            if layer + 1 < cfg.n_decoder_layers and cfg.iterative_refinement:
                hidden, logits, delta = self._heads(x)
                aux.append((logits, (cur_logit + delta).sigmoid()))
                # next layer refines around this layer's boxes; no gradient through the reference
                cur_logit = Tensor((cur_logit + delta).data)
                ref = 1.0 / (1.0 + np.exp(-cur_logit.data))
        hidden, logits, delta = self._heads(x)
        boxes = (cur_logit + delta).sigmoid()
        return DecodeOutput(hidden, logits, boxes, R, aux)

    def _heads(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        hidden = layer_norm(x, self["head.ln_g"], self["head.ln_b"])
        logits = linear(hidden, self["head.cls_w"], self["head.cls_b"])
        delta = linear(linear(hidden, self["head.box_w1"], self["head.box_b1"]).relu(), self["head.box_w2"], self["head.box_b2"])
        return hidden, logits, delta

    def spatial_bias(self, ref: np.ndarray) -> np.ndarray | None:
        """Log-Gaussian cross-attention prior ``(B, N, n_tokens)`` centred on each reference box."""
        width = self.cfg.spatial_prior
        if width <= 0:
            return None
        cells = self._cells
        ref = np.asarray(ref, dtype=float)
        dx = cells[None, None, :, 0] - ref[..., 0:1]
        dy = cells[None, None, :, 1] - ref[..., 1:2]
        sx = np.maximum(width * ref[..., 2:3], 1e-3)
        sy = np.maximum(width * ref[..., 3:4], 1e-3)
        return -0.5 * ((dx / sx) ** 2 + (dy / sy) ** 2)

    def forward(self, images: np.ndarray) -> DecodeOutput:
        return self.decode(self.encode(images))

    def predict(self, images: np.ndarray) -> list[Predictions]:
        from .numerics import no_grad

        with no_grad():
            return self.forward(images).predictions()

    # -- parameter snapshots ------------------------------------------------------------
    def snapshot(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_snapshot(self, snap) -> None:
        for k, v in snap.items():
            self.params[k].data = np.array(v, dtype=float, copy=True)

    def copy(self) -> "Detector":
        return Detector(self.cfg, OrderedDict((k, parameter(v.data.copy())) for k, v in self.params.items()))

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def save_checkpoint(det: Detector, path, extra: dict | None = None) -> None:
    """Flat little-endian float64 blob preceded by a JSON header (names, shapes, config hash)."""
    header = {
        "names": list(det.params),
        "shapes": [list(v.shape) for v in det.params.values()],
        "config": asdict(det.cfg),
        "config_hash": det.cfg.hash(),
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        for v in det.params.values():
            fh.write(np.ascontiguousarray(v.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[Detector, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n])
    cfg = DetectorConfig(**header["config"])
    if cfg.hash() != header["config_hash"]:
        raise ValueError(f"{path}: config hash mismatch")
    flat = np.frombuffer(raw[16 + n:], dtype="<f8")
    params = OrderedDict()
    off = 0
    for name, shape in zip(header["names"], header["shapes"]):
        size = int(np.prod(shape)) if shape else 1
        params[name] = parameter(flat[off:off + size].reshape(shape))
        off += size
    if off != flat.size:
        raise ValueError(f"{path}: payload size mismatch")
    return Detector(cfg, params), header
