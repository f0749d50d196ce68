"""Matching cost plus one-to-one and one-to-many target/proposal assignment."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .geometry import boxes_array, pairwise_giou


@dataclass(frozen=True)
class MatchCostWeights:
    lambda_class: float = 2.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0

    def __post_init__(self):
        ws = (self.lambda_class, self.lambda_l1, self.lambda_giou)
        if min(ws) < 0 or max(ws) <= 0:
            raise ValueError(f"cost weights must be nonnegative with one positive, got {ws}")


@dataclass
class AssignmentResult:
    """``pairs`` are ``(target_index, proposal_index)`` sorted by target then proposal."""

    pairs: list[tuple[int, int]] = field(default_factory=list)
    total_cost: float = 0.0

    @property
    def targets(self) -> np.ndarray:
        return np.array([t for t, _ in self.pairs], dtype=int)

    @property
    def proposals(self) -> np.ndarray:
        return np.array([p for _, p in self.pairs], dtype=int)

    def proposals_for(self, target: int) -> list[int]:
        return [p for t, p in self.pairs if t == target]


def _result(cost: np.ndarray, pairs) -> AssignmentResult:
    pairs = sorted((int(t), int(p)) for t, p in pairs)
    total = 0.0
    for t, p in pairs:
        total += float(cost[t, p])
    return AssignmentResult(pairs, total)


def match_cost(prediction, target, w: MatchCostWeights = MatchCostWeights()) -> float:
    """Cost of assigning ``target = (class_id, box)`` to ``prediction = (class_probs, box)``."""
    probs, pbox = prediction
    cls, tbox = target
    probs = np.asarray(probs, dtype=float)
    if not 0 <= cls < len(probs):
        raise ValueError(f"class id {cls} outside [0, {len(probs)})")
    return float(cost_matrix(probs[None], boxes_array([pbox]), np.array([cls]), boxes_array([tbox]), w)[0, 0])


def cost_matrix(class_probs, pred_boxes, target_classes, target_boxes, w: MatchCostWeights = MatchCostWeights()) -> np.ndarray:
    """``(T, P)`` matching cost between targets and predictions."""
    class_probs = np.asarray(class_probs, dtype=float)
    pred_boxes = boxes_array(pred_boxes)
    target_boxes = boxes_array(target_boxes)
    target_classes = np.asarray(target_classes, dtype=int)
    if len(target_classes) == 0 or len(pred_boxes) == 0:
        return np.zeros((len(target_classes), len(pred_boxes)))
    cls_cost = 1.0 - class_probs[:, target_classes].T
    l1 = np.abs(target_boxes[:, None, :] - pred_boxes[None, :, :]).sum(-1)
    g = pairwise_giou(target_boxes, pred_boxes)
    return w.lambda_class * cls_cost + w.lambda_l1 * l1 + w.lambda_giou * (1.0 - g)


def hungarian(cost) -> AssignmentResult:
    """Minimum-cost perfect matching of all rows (targets) to distinct columns.

    Shortest augmenting path with dual potentials, O(T^2 P). If there are more
    targets than proposals, every proposal is matched and surplus targets stay
    unmatched.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {cost.shape}")
    if cost.size == 0:
        return AssignmentResult([], 0.0)
    if not np.all(np.isfinite(cost)):
        raise ValueError("hungarian: costs must be finite")
    transposed = cost.shape[0] > cost.shape[1]
    c = cost.T if transposed else cost
    n, m = c.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=int)  # owner[j]: 1-based row holding column j
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = c[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    pairs = [(owner[j] - 1, j - 1) for j in range(1, m + 1) if owner[j]]
    if transposed:
        pairs = [(p, t) for t, p in pairs]
    return _result(cost, pairs)


def one_to_many_assign(cost, M: int) -> AssignmentResult:
    """Give each target up to ``M`` proposals, each proposal owned at most once.

    Pairs are visited in ascending ``(cost, target, proposal)`` order; a pair is
    taken when its proposal is unclaimed and its target still has room.
    """
    if M < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    cost = np.asarray(cost, dtype=float)
    if cost.size == 0:
        return AssignmentResult([], 0.0)
    T, P = cost.shape
    flat = cost.ravel()
    finite = np.flatnonzero(np.isfinite(flat))
    # lexsort: last key is primary
    order = finite[np.lexsort((finite % P, finite // P, flat[finite]))]
    claimed = np.zeros(P, dtype=bool)
    load = np.zeros(T, dtype=int)
    pairs = []
    for idx in order:
        t, p = divmod(int(idx), P)
        if claimed[p] or load[t] >= M:
            continue
        claimed[p] = True
        load[t] += 1
        pairs.append((t, p))
        if claimed.all() or (load >= M).all():
            break
    return _result(cost, pairs)


def brute_force_one_to_one(cost) -> AssignmentResult:
    """Exhaustive minimum over injective target->proposal maps.

    Among equal-cost optima the lexicographically smallest pair list wins.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.size == 0:
        return AssignmentResult([], 0.0)
    T, P = cost.shape
    if min(T, P) > 8 or max(T, P) > 10:
        raise ValueError(f"brute force limited to min side <= 8 and max side <= 10, got {cost.shape}")
    best_pairs, best = None, np.inf
    if T <= P:
        for perm in itertools.permutations(range(P), T):
            pairs = list(enumerate(perm))
            total = sum(float(cost[t, p]) for t, p in pairs)
            if total < best:
                best, best_pairs = total, pairs
    else:
        for perm in itertools.permutations(range(T), P):
            pairs = sorted((t, p) for p, t in enumerate(perm))
            total = sum(float(cost[t, p]) for t, p in pairs)
            if total < best or (total == best and pairs < best_pairs):
                best, best_pairs = total, pairs
    return _result(cost, best_pairs)


def brute_force_one_to_many(cost, M: int) -> AssignmentResult:
    """Enumerate every ownership map (proposal -> target or none) with per-target load <= M.

    Returns the map whose membership vector, read over pairs sorted by
    ``(cost, target, proposal)``, is lexicographically greatest; this is the
    characterization of the greedy ownership rule.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.size == 0:
        return AssignmentResult([], 0.0)
    T, P = cost.shape
    if (T + 1) ** P > 200_000:
        raise ValueError(f"enumeration too large for shape {cost.shape}")
    ranked = sorted(((cost[t, p], t, p) for t in range(T) for p in range(P) if np.isfinite(cost[t, p])))
    rank = {(t, p): r for r, (_, t, p) in enumerate(ranked)}
    best_key, best_pairs = None, []
    for owners in itertools.product(range(-1, T), repeat=P):
        pairs = [(t, p) for p, t in enumerate(owners) if t >= 0]
        if any((t, p) not in rank for t, p in pairs):
            continue
        if any(owners.count(t) > M for t in range(T)):
            continue
        key = [0] * len(ranked)
        for tp in pairs:
            key[rank[tp]] = 1
        if best_key is None or key > best_key:
            best_key, best_pairs = key, pairs
    return _result(cost, best_pairs)
