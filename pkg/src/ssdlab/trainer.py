"""Teacher-student training: supervised branch, pseudo-labeled branch, consistency, EMA."""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import augmentation as aug
from .assignment import MatchCostWeights, cost_matrix, hungarian, one_to_many_assign
from .detector import Detector, DetectorConfig, Predictions
from .geometry import giou_tensor
from .metrics import Detections, EvalReport, GroundTruth, evaluate
from .numerics import Tensor, cross_entropy, no_grad, softmax
from .pseudo_labels import PseudoLabelSet, filter_by_confidence, reliable_pseudo_labels
from .query_refine import (STRONG, WEAK, RefineConfig, build_student_concat, build_teacher_refined,
                           extract_features, pool_by_box, project)
from .synthdata import ConfigError, Dataset, DatasetSplit

MODES = ("supervised", "baseline_ssod", "sparse_ssod")


class Stage(enum.Enum):
    ONE_TO_MANY = "one_to_many"
    ONE_TO_ONE = "one_to_one"


class NumericalFailure(RuntimeError):
    def __init__(self, message: str, batch: dict):
        super().__init__(message)
        self.batch = batch


@dataclass
class TrainConfig:
    mode: str = "sparse_ssod"
    total_iterations: int = 1200
    stage_switch_iteration: int = 600
    labeled_batch: int = 2
    unlabeled_batch: int = 8  # 1:4
    lr: float = 1e-3
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    alpha: float = 4.0
    consistency_weight: float = 1.0
    ema_rate: float = 0.996
    sigma: float = 0.4
    m: int = 6
    k: int = 4
    tau_support: float = 0.5
    tau_dup: float = 0.7
    temperature: float = 0.1
    similarity: bool = True
    similarity_mode: str = "soft"
    attention_placement: str = "low"
    one_to_many_width: int = 4
    query_refinement: bool = True
    pseudo_filtering: bool = True
    max_pseudo: int = 8
    jitter_center: float = 0.1
    jitter_scale: tuple = (0.8, 1.25)
    cost_class: float = 2.0
    cost_l1: float = 5.0
    cost_giou: float = 2.0
    loss_class: float = 1.0
    loss_l1: float = 5.0
    loss_giou: float = 2.0
    background_weight: float = 0.1
    aux_loss: bool = True  # also supervise intermediate decoder layers
    seed: int = 0
    eval_every: int = 0  # 0: evaluate only at the end
    eval_score_floor: float = 0.3

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        self.jitter_scale = tuple(self.jitter_scale)
        problems = []
        if self.mode not in MODES:
            problems.append(f"mode must be one of {MODES}")
        if self.total_iterations < 1:
            problems.append("total_iterations must be >= 1")
        if not 0 <= self.stage_switch_iteration <= self.total_iterations:
            problems.append("stage_switch_iteration must lie in [0, total_iterations]")
        if self.alpha < 0:
            problems.append("alpha must be >= 0")
        if not 0.0 <= self.ema_rate <= 1.0:
            problems.append("ema_rate must lie in [0, 1]")
        if not 0.0 < self.sigma < 1.0:
            problems.append("sigma must lie in (0, 1)")
        if self.m < 1 or not 1 <= self.k <= self.m:
            problems.append("need 1 <= k <= m")
        if self.labeled_batch < 0 or self.unlabeled_batch < 0:
            problems.append("batch sizes must be >= 0")
        if self.one_to_many_width < 1:
            problems.append("one_to_many_width must be >= 1")
        if self.max_pseudo < 1:
            problems.append("max_pseudo must be >= 1")
        if problems:
            raise ConfigError("; ".join(problems))

    @classmethod
    def for_mode(cls, mode: str, **overrides) -> "TrainConfig":
        """Config with the module toggles implied by ``mode``."""
        toggles = {"supervised": (False, False), "baseline_ssod": (False, False), "sparse_ssod": (True, True)}
        if mode not in toggles:
            raise ConfigError(f"mode must be one of {MODES}")
        qr, pf = toggles[mode]
        base = {"mode": mode, "query_refinement": qr, "pseudo_filtering": pf}
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def cost_weights(self) -> MatchCostWeights:
        return MatchCostWeights(self.cost_class, self.cost_l1, self.cost_giou)

    @property
    def refine(self) -> RefineConfig:
        return RefineConfig(self.similarity, self.attention_placement, self.temperature, self.similarity_mode,
                            max_pseudo=self.max_pseudo)


def stage_for_iteration(i: int, cfg: TrainConfig) -> Stage:
    if not 0 <= i < cfg.total_iterations:
        raise ValueError(f"iteration {i} outside [0, {cfg.total_iterations})")
    return Stage.ONE_TO_MANY if i < cfg.stage_switch_iteration else Stage.ONE_TO_ONE


def ema_update(teacher: Detector, student: Detector, rate: float) -> None:
    """In place: theta_t = rate * theta_t + (1 - rate) * theta_s."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    if teacher.params.keys() != student.params.keys():
        raise ValueError("teacher and student parameter names differ")
    for name, tp in teacher.params.items():
        sp = student.params[name]
        if tp.data.shape != sp.data.shape:
            raise ValueError(f"shape mismatch for {name}: {tp.data.shape} vs {sp.data.shape}")
        tp.data = rate * tp.data + (1.0 - rate) * sp.data


class Adam:
    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.betas, self.eps = lr, tuple(betas), eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, params: dict) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for k, p in params.items():
            if p.grad is None:
                continue
            self.m[k] = b1 * self.m[k] + (1 - b1) * p.grad
            self.v[k] = b2 * self.v[k] + (1 - b2) * p.grad**2
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class TrainerState:
    student: Detector
    teacher: Detector
    optimizer: Adam
    iteration: int
    rngs: dict

    @classmethod
    def create(cls, det_cfg: DetectorConfig, cfg: TrainConfig) -> "TrainerState":
        student = Detector(det_cfg, seed=cfg.seed)
        names = ("labeled_data", "unlabeled_data", "labeled_aug", "unlabeled_aug", "jitter")
        seqs = np.random.SeedSequence(cfg.seed).spawn(len(names))
        rngs = {n: np.random.default_rng(s) for n, s in zip(names, seqs)}
        return cls(student, student.copy(), Adam(student.params, cfg.lr, cfg.adam_betas, cfg.adam_eps), 0, rngs)


@dataclass
class LossTerms:
    total: Tensor
    classification: float = 0.0
    l1: float = 0.0
    giou: float = 0.0
    n_pairs: int = 0
    consistency: float = 0.0


def _zero() -> Tensor:
    return Tensor(np.zeros(()))


def detection_loss(logits: Tensor, boxes: Tensor, targets: list, cfg: TrainConfig, stage: Stage = Stage.ONE_TO_ONE) -> LossTerms:
    """Matched set loss over a batch.

    ``targets[b]`` is ``(classes, boxes)`` or ``None`` to leave image ``b`` out
    entirely. Unmatched queries of included images are pushed toward background
    with weight ``background_weight``.
    """
    B, Q, C1 = logits.shape
    probs = softmax(logits, axis=-1).data if B else np.zeros((0, Q, C1))
    tgt_cls = np.full((B, Q), C1 - 1, dtype=int)
    weights = np.full((B, Q), cfg.background_weight)
    rows_b, rows_q, tboxes = [], [], []
    for b, tgt in enumerate(targets):
        if tgt is None:
            weights[b] = 0.0
            continue
        cls, tb = np.asarray(tgt[0], dtype=int), np.asarray(tgt[1], dtype=float).reshape(-1, 4)
        if len(cls) == 0:
            continue
        cost = cost_matrix(probs[b], boxes.data[b], cls, tb, cfg.cost_weights)
        res = one_to_many_assign(cost, cfg.one_to_many_width) if stage is Stage.ONE_TO_MANY else hungarian(cost)
        for t, q in res.pairs:
            tgt_cls[b, q] = cls[t]
            weights[b, q] = 1.0
            rows_b.append(b)
            rows_q.append(q)
            tboxes.append(tb[t])
    if weights.sum() == 0:
        return LossTerms(_zero())
    ce = cross_entropy(logits.reshape(B * Q, C1), tgt_cls.reshape(-1), weights.reshape(-1))
    total = ce * cfg.loss_class
    terms = LossTerms(total, classification=float(ce.data))
    K = len(rows_b)
    if K:
        pb = boxes[(np.array(rows_b), np.array(rows_q))]
        tb = np.stack(tboxes)
        l1 = (pb - Tensor(tb)).abs().sum() * (1.0 / K)
        gl = (Tensor(np.ones(K)) - giou_tensor(pb, tb)).sum() * (1.0 / K)
        terms.total = total + l1 * cfg.loss_l1 + gl * cfg.loss_giou
        terms.l1, terms.giou, terms.n_pairs = float(l1.data), float(gl.data), K
    return terms


def layered_loss(layers: list, targets: list, cfg: TrainConfig, stage: Stage) -> LossTerms:
    """Sum of :func:`detection_loss` over ``[(logits, boxes), ...]``; statistics come from the last layer."""
    terms = [detection_loss(lg, bx, targets, cfg, stage) for lg, bx in layers]
    out = terms[-1]
    for t in terms[:-1]:
        out.total = out.total + t.total
    return out


def _output_layers(out, rows: slice, cfg: TrainConfig) -> list:
    layers = [(lg[rows], bx[rows]) for lg, bx in out.aux] if cfg.aux_loss else []
    return layers + [(out.logits[rows], out.boxes[rows])]


def supervised_loss(logits: Tensor, boxes: Tensor, gts: list, cfg: TrainConfig) -> LossTerms:
    """One-to-one matched loss against ground truth ``[(classes, boxes), ...]``."""
    return detection_loss(logits, boxes, list(gts), cfg, Stage.ONE_TO_ONE)


def consistency_loss(o_s: Tensor, o_t: np.ndarray, valid: np.ndarray) -> Tensor:
    """Mean squared difference over valid pseudo-box slots; ``o_t`` is treated as a constant."""
    valid = np.asarray(valid, dtype=bool)
    n = int(valid.sum())
    if n == 0:
        return _zero()
    diff = o_s - Tensor(np.asarray(o_t))
    w = valid[..., None].astype(float) / (n * o_s.shape[-1])
    return (diff * diff * Tensor(w)).sum()


def unsupervised_loss(logits: Tensor, boxes: Tensor, pseudo: list, stage: Stage, o_s: Tensor | None,
                      o_t: np.ndarray | None, valid: np.ndarray | None, cfg: TrainConfig) -> tuple[LossTerms, LossTerms]:
    """Returns ``(assignment, consistency)`` terms; the combined step weights them.

    Images with an empty pseudo set contribute no assignment term.
    """
    targets = [(p.classes, p.boxes) if len(p) else None for p in pseudo]
    assign = detection_loss(logits, boxes, targets, cfg, stage)
    if o_s is None or cfg.consistency_weight == 0:
        return assign, LossTerms(_zero())
    c = consistency_loss(o_s, o_t, valid)
    return assign, LossTerms(c * cfg.consistency_weight, consistency=float(c.data))


@dataclass
class Batch:
    ids: list
    images: np.ndarray
    boxes: list
    classes: list


def sample_batch(ds: Dataset, pool: list, size: int, rng: np.random.Generator) -> Batch:
    if size == 0 or not pool:
        return Batch([], np.zeros((0,) + ds.images.shape[1:]), [], [])
    idx = rng.choice(len(pool), size=size, replace=len(pool) < size)
    rows = [pool[i] for i in idx]
    return Batch([ds.ids[r] for r in rows], ds.images[rows], [ds.boxes[r] for r in rows], [ds.classes[r] for r in rows])


def _pad_boxes(sets: list[PseudoLabelSet], cap: int) -> tuple[np.ndarray, np.ndarray]:
    boxes = np.tile(np.array([0.5, 0.5, 0.25, 0.25]), (len(sets), cap, 1))
    valid = np.zeros((len(sets), cap), dtype=bool)
    for b, p in enumerate(sets):
        n = min(len(p), cap)
        boxes[b, :n] = p.boxes[:n]
        valid[b, :n] = True
    return boxes, valid


def _top_scores(p: PseudoLabelSet, cap: int) -> PseudoLabelSet:
    if len(p) <= cap:
        return p
    order = np.argsort(-p.scores, kind="mergesort")[:cap]
    return p.take(np.sort(order))


def _check_finite(value: float, name: str, lab: Batch, unl: Batch, it: int) -> None:
    if not np.isfinite(value):
        raise NumericalFailure(f"non-finite {name} at iteration {it}",
                               {"iteration": it, "labeled_ids": lab.ids, "unlabeled_ids": unl.ids, "term": name})


def _max_abs(out) -> float:
    return float(max(np.abs(out.logits.data).max(initial=0.0), np.abs(out.boxes.data).max(initial=0.0)))


def train_step(state: TrainerState, lab: Batch, unl: Batch, cfg: TrainConfig) -> dict:
    """One optimizer step on the student followed by the EMA teacher update."""
    it = state.iteration
    stage = stage_for_iteration(it, cfg)
    student, teacher = state.student, state.teacher
    n_lab = len(lab.ids)
    use_unl = cfg.mode != "supervised" and len(unl.ids) > 0

    lab_aug = [aug.apply(img, bx, cl, aug.AugPolicy.labeled(), state.rngs["labeled_aug"])
               for img, bx, cl in zip(lab.images, lab.boxes, lab.classes)]
    stats = {"iteration": it, "stage": stage.value, "n_pseudo": 0, "n_kept": 0, "n_duplicates": 0,
             "n_unreliable": 0}
    images = [a.image for a in lab_aug]

    if use_unl:
        weak, strong = [], []
        for img in unl.images:
            weak.append(aug.apply(img, [], [], aug.AugPolicy.weak(), state.rngs["unlabeled_aug"]))
            strong.append(aug.apply(img, [], [], aug.AugPolicy.strong(), state.rngs["unlabeled_aug"]))
        with no_grad():
            t_tokens = teacher.encode(np.stack([w.image for w in weak]))
            t_out = teacher.decode(t_tokens)
        _check_finite(_max_abs(t_out), "teacher output", lab, unl, it)
        t_preds = t_out.predictions()
        pseudo_weak = [_top_scores(filter_by_confidence(p, cfg.sigma, it, aug.compose_frames(w.transform, s.transform)),
                                   cfg.max_pseudo)
                       for p, w, s in zip(t_preds, weak, strong)]
        stats["n_pseudo"] = int(sum(len(p) for p in pseudo_weak))
        pseudo_strong = []
        for b, p in enumerate(pseudo_weak):
            ps, keep = p.in_student_frame()
            pseudo_weak[b] = p.take(keep)
            pseudo_strong.append(ps)
        # with no pseudo labels the strong views add nothing to the loss; skip their forward pass
        use_unl = any(len(p) for p in pseudo_strong)
        if use_unl:
            images += [s.image for s in strong]

    s_tokens = student.encode(np.stack(images)) if images else None
    s_out = student.decode(s_tokens) if images else None
    if s_out is not None:
        _check_finite(_max_abs(s_out), "student output", lab, unl, it)

    lab_rows = slice(0, n_lab)
    sup = layered_loss(_output_layers(s_out, lab_rows, cfg), [(a.classes, a.boxes) for a in lab_aug], cfg,
                       Stage.ONE_TO_ONE) if n_lab else LossTerms(_zero())
    total = sup.total
    assign = cons = LossTerms(_zero())

    if use_unl:
        u_logits, u_boxes = s_out.logits[n_lab:], s_out.boxes[n_lab:]
        if cfg.pseudo_filtering:
            probs = softmax(u_logits, axis=-1).data
            for b in range(len(pseudo_strong)):
                if len(pseudo_strong[b]) == 0:
                    continue
                sp = Predictions(probs[b], u_boxes.data[b])
                kept, report = reliable_pseudo_labels(
                    sp, pseudo_strong[b], cfg.m, cfg.k, state.rngs["jitter"], cfg.cost_weights,
                    cfg.tau_support, cfg.tau_dup, center_noise=cfg.jitter_center, scale_range=cfg.jitter_scale)
                stats["n_duplicates"] += len(report.duplicates)
                stats["n_unreliable"] += len(report.unreliable)
                pseudo_strong[b] = kept
                pseudo_weak[b] = pseudo_weak[b].take(report.kept)
        stats["n_kept"] = int(sum(len(p) for p in pseudo_strong))
        o_s = o_t = valid = None
        if cfg.query_refinement and stats["n_kept"] > 0:
            o_s, o_t, valid = _refined_views(state, t_tokens, s_tokens[n_lab:], pseudo_weak, pseudo_strong, cfg)
        targets = [(p.classes, p.boxes) if len(p) else None for p in pseudo_strong]
        assign = layered_loss(_output_layers(s_out, slice(n_lab, None), cfg), targets, cfg, stage)
        cons = LossTerms(_zero())
        if o_s is not None and cfg.consistency_weight:
            c = consistency_loss(o_s, o_t, valid)
            cons = LossTerms(c * cfg.consistency_weight, consistency=float(c.data))
        total = total + assign.total * cfg.alpha + cons.total

    loss_value = float(total.data)
    _check_finite(loss_value, "loss", lab, unl, it)
    for p in student.params.values():
        p.grad = None
    if total.requires_grad:
        total.backward()
    for name, p in student.params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            _check_finite(np.nan, f"gradient of {name}", lab, unl, it)
    state.optimizer.step(student.params)
    ema_update(teacher, student, cfg.ema_rate)
    state.iteration += 1
    stats.update(loss=loss_value, sup_class=sup.classification, sup_l1=sup.l1, sup_giou=sup.giou,
                 unsup_class=assign.classification, unsup_l1=assign.l1, unsup_giou=assign.giou,
                 unsup_pairs=assign.n_pairs, consistency=cons.consistency)
    return stats


def _refined_views(state: TrainerState, t_tokens: Tensor, s_tokens: Tensor, pseudo_weak: list, pseudo_strong: list,
                   cfg: TrainConfig):
    """Cross-view refined decodings: the student decodes r_t, the teacher decodes r_s.

    Returns per-pseudo-box pooled hidden states ``(o_s, o_t)`` and the slot mask.
    """
    student, teacher = state.student, state.teacher
    cap, rc = cfg.max_pseudo, cfg.refine
    weak_boxes, valid = _pad_boxes(pseudo_weak, cap)
    strong_boxes, _ = _pad_boxes(pseudo_strong, cap)
    feats_t = extract_features(student, t_tokens, weak_boxes, valid, WEAK)
    r_t = build_teacher_refined(student, feats_t, rc, ref_boxes=strong_boxes)
    dec_s = student.decode(s_tokens, project(student, r_t), r_t.ref_boxes, r_t.valid, include_original=False)
    o_s = pool_by_box(dec_s.decoded_refined, r_t, cap)
    with no_grad():
        feats_s = extract_features(teacher, s_tokens.detach(), strong_boxes, valid, STRONG)
        r_s = build_student_concat(teacher, feats_s, rc, ref_boxes=weak_boxes)
        dec_t = teacher.decode(t_tokens, project(teacher, r_s), r_s.ref_boxes, r_s.valid, include_original=False)
        o_t = pool_by_box(dec_t.decoded_refined, r_s, cap).data
    return o_s, o_t, valid


def evaluate_detector(det: Detector, ds: Dataset, batch: int = 100, score_floor: float = 0.3) -> EvalReport:
    dets = []
    with no_grad():
        for i in range(0, len(ds), batch):
            dets += [Detections.from_predictions(p) for p in det.predict(ds.images[i:i + batch])]
    gts = [GroundTruth(ds.boxes[i], ds.classes[i], ds.areas[i]) for i in range(len(ds))]
    h = ds.header.get("thresholds") or {}
    area = float(det.cfg.image_size**2)
    thresholds = {"small_max_area": h.get("small_max_area", area / 64), "large_min_area": h.get("large_min_area", area / 8)}
    return evaluate(dets, gts, det.cfg.n_classes, thresholds, image_area=area, score_floor=score_floor)


@dataclass
class TrainResult:
    state: TrainerState
    history: list = field(default_factory=list)
    evals: list = field(default_factory=list)  # (iteration, EvalReport)


def fit(cfg: TrainConfig, det_cfg: DetectorConfig, train: Dataset, test: Dataset | None, split_: DatasetSplit,
        on_eval=None, on_step=None) -> TrainResult:
    """Run ``total_iterations`` steps; the EMA teacher is the evaluated model in every mode."""
    state = TrainerState.create(det_cfg, cfg)
    pos = {i: r for r, i in enumerate(train.ids)}
    lab_pool = [pos[i] for i in split_.labeled]
    unl_pool = [pos[i] for i in split_.unlabeled] if cfg.mode != "supervised" else []
    if not lab_pool and cfg.labeled_batch:
        raise ConfigError("no labeled images in split")
    result = TrainResult(state)
    for it in range(cfg.total_iterations):
        lab = sample_batch(train, lab_pool, cfg.labeled_batch, state.rngs["labeled_data"])
        unl = sample_batch(train, unl_pool, cfg.unlabeled_batch, state.rngs["unlabeled_data"])
        stats = train_step(state, lab, unl, cfg)
        result.history.append(stats)
        if on_step is not None:
            on_step(stats)
        last = it + 1 == cfg.total_iterations
        if test is not None and (last or (cfg.eval_every and (it + 1) % cfg.eval_every == 0)):
            report = evaluate_detector(state.teacher, test, score_floor=cfg.eval_score_floor)
            result.evals.append((it + 1, report))
            if on_eval is not None:
                on_eval(it + 1, report)
    return result
