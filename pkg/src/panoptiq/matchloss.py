"""Set-prediction losses, matching costs and one-to-one Hungarian assignment."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import diffmath as dm

P_CLIP = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lf: float = 1.0  # classification focal
    lbf: float = 1.0  # mask binary focal
    ldf: float = 2.0  # mask dice
    lfp: float = 0.2  # position-mask dice
    lbce: float = 0.0  # mask binary cross-entropy (loss-weight ablation only)
    gamma: float = 2.0
    alpha: float = 0.25
    dice_eps: float = 1.0
    cost_focal_class: bool = False  # focal instead of -log p for the class cost
    cost_noobj: bool = True  # softmax over classes + no-object in the class cost
    cost_position: bool = True  # position-dice term in the matching cost
    position_things_only: bool = False
    cls_norm: str = "targets"  # elements: mean over N x (K+1); targets: sum / max(1, matched targets)

    def __post_init__(self):
        for name in ("lf", "lbf", "ldf", "lfp", "lbce"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")
        if self.cls_norm not in ("elements", "targets"):
            raise ValueError(f"loss.cls_norm must be elements or targets, got {self.cls_norm!r}")


@dataclass
class Assignment:
    """``queries[t]`` is the query matched to target ``t``."""

    queries: np.ndarray
    total_cost: float

    def as_dict(self) -> Dict[int, int]:
        return {t: int(q) for t, q in enumerate(self.queries)}


# --- loss terms (differentiable) -------------------------------------------


def focal_loss(p: dm.Tensor, targets: np.ndarray, gamma: float = 2.0, alpha: float = 0.25) -> dm.Tensor:
    """Mean over elements of -alpha (1 - p_t)^gamma log p_t."""
    t = np.asarray(targets, dtype=np.float64)
    tape = p.tape
    pc = dm.clip(p, P_CLIP, 1.0 - P_CLIP)
    p_t = dm.add(dm.mul(pc, tape.const(2.0 * t - 1.0)), tape.const(1.0 - t))
    logp = dm.log(p_t)
    if gamma:
        mod = dm.power(dm.shift(dm.scale(p_t, -1.0), 1.0), gamma)
        logp = dm.mul(mod, logp)
    return dm.scale(dm.mean(logp), -alpha)


def bce_loss(p: dm.Tensor, targets: np.ndarray) -> dm.Tensor:
    return focal_loss(p, targets, gamma=0.0, alpha=1.0)


def dice_rows(p: dm.Tensor, targets: np.ndarray, eps: float = 1.0) -> dm.Tensor:
    """Per-row 1 - (2 sum(p t) + eps) / (sum p + sum t + eps) for T x V inputs."""
    t = np.asarray(targets, dtype=np.float64)
    tape = p.tape
    num = dm.shift(dm.scale(dm.sum(dm.mul(p, tape.const(t)), axis=1), 2.0), eps)
    den = dm.add(dm.sum(p, axis=1), tape.const(t.sum(axis=1) + eps))
    return dm.shift(dm.scale(dm.div(num, den), -1.0), 1.0)


def dice_loss(p: dm.Tensor, targets: np.ndarray, eps: float = 1.0) -> dm.Tensor:
    """Dice loss of one mask (1-D) or the mean over rows (2-D)."""
    t = np.asarray(targets, dtype=np.float64)
    if len(p.shape) == 1:
        return dm.mean(dice_rows(dm.reshape(p, (1, p.shape[0])), t[None, :], eps))
    return dm.mean(dice_rows(p, t, eps))


# --- numpy versions used for matching costs --------------------------------


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _focal_cost_p(p, G, gamma, alpha):
    p = np.clip(p, P_CLIP, 1 - P_CLIP)
    pos = -alpha * (1 - p) ** gamma * np.log(p)
    neg = -alpha * p**gamma * np.log(1 - p)
    Gf = G.astype(np.float64)
    return (Gf @ pos.T + (1 - Gf) @ neg.T) / p.shape[1]


def _dice_cost_p(p, G, eps):
    Gf = G.astype(np.float64)
    num = 2 * Gf @ p.T + eps
    den = Gf.sum(axis=1)[:, None] + p.sum(axis=1)[None, :] + eps
    return 1 - num / den


def focal_cost(logits: np.ndarray, G: np.ndarray, gamma: float, alpha: float) -> np.ndarray:
    """T x N mean binary focal loss of every query mask against every target mask."""
    return _focal_cost_p(_sigmoid(logits), G, gamma, alpha)


def dice_cost(logits: np.ndarray, G: np.ndarray, eps: float) -> np.ndarray:
    return _dice_cost_p(_sigmoid(logits), G, eps)


def matching_cost(out, target_masks: np.ndarray, target_labels: np.ndarray, weights: LossWeights,
                  with_class: bool = True, thing_rows: Optional[np.ndarray] = None) -> np.ndarray:
    """Targets x queries cost mirroring the loss terms.

    ``target_labels`` are head indices (0..K-1); the last logit column is no-object.
    """
    C = out.C.value
    M = out.M.value
    T = len(target_labels)
    cost = np.zeros((T, C.shape[0]))
    if T == 0:
        return cost
    if with_class and weights.lf:
        logits = C if weights.cost_noobj else C[:, :-1]
        if weights.cost_focal_class:
            p = np.clip(_sigmoid(logits[:, target_labels]).T, P_CLIP, 1 - P_CLIP)
            cls_cost = -weights.alpha * (1 - p) ** weights.gamma * np.log(p)
        else:
            cls_cost = -np.log(np.clip(_softmax(logits)[:, target_labels].T, P_CLIP, None))
        cost += weights.lf * cls_cost
    pm = _sigmoid(M)
    if weights.lbf:
        cost += weights.lbf * _focal_cost_p(pm, target_masks, weights.gamma, weights.alpha)
    if weights.lbce:
        cost += weights.lbce * _focal_cost_p(pm, target_masks, 0.0, 1.0)
    if weights.ldf:
        cost += weights.ldf * _dice_cost_p(pm, target_masks, weights.dice_eps)
    if weights.lfp and weights.cost_position and out.M_P is not None:
        pc = weights.lfp * dice_cost(out.M_P.value, target_masks, weights.dice_eps)
        if thing_rows is not None:
            pc = pc * thing_rows[:, None]
        cost += pc
    return cost


# --- Hungarian assignment --------------------------------------------------


def _solve(cost: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shortest augmenting path with potentials for a T x N matrix, T <= N.

    Returns (row->col assignment, row potentials u, column potentials v)."""
    T, N = cost.shape
    INF = np.inf
    u = np.zeros(T + 1)
    v = np.zeros(N + 1)
    p = np.zeros(N + 1, dtype=np.int64)  # p[j] = 1-based row matched to column j
    way = np.zeros(N + 1, dtype=np.int64)
    a = np.zeros((T + 1, N + 1))
    a[1:, 1:] = cost
    for i in range(1, T + 1):
        p[0] = i
        j0 = 0
        minv = np.full(N + 1, INF)
        used = np.zeros(N + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cur = a[i0] - u[i0] - v
            upd = free & (cur < minv)
            minv[upd] = cur[upd]
            way[upd] = j0
            cand = np.where(free, minv, INF)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    assign = np.full(T, -1, dtype=np.int64)
    for j in range(1, N + 1):
        if p[j]:
            assign[p[j] - 1] = j - 1
    return assign, u[1:], v[1:]


def _match_size(adj: List[List[int]], rows: List[int], blocked: set) -> int:
    """Maximum matching size from ``rows`` into unblocked columns (simple augmenting paths)."""
    owner: Dict[int, int] = {}

    def augment(r, seen):
        for c in adj[r]:
            if c in blocked or c in seen:
                continue
            seen.add(c)
            if c not in owner or augment(owner[c], seen):
                owner[c] = r
                return True
        return False

    return sum(1 for r in rows if augment(r, set()))


def _completable(adj, radj, free_rows: List[int], used: set, forced: List[int]) -> bool:
    """Whether the free rows can all be matched while every forced column is covered.

    Two one-sided matchings suffice: a bipartite graph with a matching covering a
    row set and one covering a column set also has one covering both.
    """
    if _match_size(adj, free_rows, used) < len(free_rows):
        return False
    need = [c for c in forced if c not in used]
    free = set(free_rows)
    col_adj = {c: [r for r in radj[c] if r in free] for c in need}
    return _match_size(col_adj, need, set()) == len(need)


def hungarian(cost: np.ndarray) -> Assignment:
    """Minimum-cost injective map targets -> queries.

    Among optimal maps the lexicographically smallest assignment vector is returned.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be a matrix, got shape {cost.shape}")
    T, N = cost.shape
    if T > N:
        raise ValueError(f"{T} targets cannot be matched injectively to {N} queries")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")
    if T == 0:
        return Assignment(np.zeros(0, np.int64), 0.0)
    assign, u, v = _solve(cost)
    tol = 1e-9 * max(1.0, float(np.abs(cost).max())) * T
    # optimal maps are exactly the row-saturating matchings on tight edges that
    # also use every column with a negative potential
    tight = (cost - u[:, None] - v[None, :]) <= tol
    tight[np.arange(T), assign] = True
    if tight.sum() > T:
        adj = [np.flatnonzero(tight[t]).tolist() for t in range(T)]
        radj = {c: np.flatnonzero(tight[:, c]).tolist() for c in range(N)}
        forced = np.flatnonzero(v < -tol).tolist()
        used: set = set()
        for t in range(T):
            for q in adj[t]:
                if q in used:
                    continue
                used.add(q)
                if _completable(adj, radj, list(range(t + 1, T)), used, forced):
                    assign[t] = q
                    break
                used.discard(q)
    total = float(cost[np.arange(T), assign].sum())
    return Assignment(assign, total)


# --- full set-prediction loss ----------------------------------------------


@dataclass
class LayerLoss:
    terms: Dict[str, float]
    assignment: Assignment


def layer_loss(out, target_masks: np.ndarray, target_labels: np.ndarray, num_classes: int,
               weights: LossWeights, with_class: bool, thing_rows: Optional[np.ndarray] = None):
    """Loss of one layer's predictions; returns (scalar tensor or None, LayerLoss)."""
    N = out.C.shape[0]
    cost = matching_cost(out, target_masks, target_labels, weights, with_class, thing_rows)
    assignment = hungarian(cost)
    parts: List[dm.Tensor] = []
    terms: Dict[str, float] = {}

    def term(name, weight, tensor):
        if weight:
            t = dm.scale(tensor, weight)
            parts.append(t)
            terms[name] = float(t.value)

    if with_class:
        onehot = np.zeros((N, num_classes + 1))
        onehot[:, num_classes] = 1.0
        onehot[assignment.queries, num_classes] = 0.0
        onehot[assignment.queries, target_labels] = 1.0
        cls = focal_loss(dm.sigmoid(out.C), onehot, weights.gamma, weights.alpha)
        if weights.cls_norm == "targets":
            cls = dm.scale(cls, onehot.size / max(1, len(target_labels)))
        term("cls", weights.lf, cls)

    if len(target_labels):
        q = assignment.queries
        G = target_masks.astype(np.float64)
        pm = dm.sigmoid(dm.select(out.M, q, axis=0))
        term("mask_focal", weights.lbf, focal_loss(pm, G, weights.gamma, weights.alpha))
        term("mask_bce", weights.lbce, bce_loss(pm, G))
        term("mask_dice", weights.ldf, dm.mean(dice_rows(pm, G, weights.dice_eps)))
        if out.M_P is not None and weights.lfp:
            rows = q if thing_rows is None else q[thing_rows.astype(bool)]
            Gp = G if thing_rows is None else G[thing_rows.astype(bool)]
            if len(rows):
                pp = dm.sigmoid(dm.select(out.M_P, rows, axis=0))
                term("pos_dice", weights.lfp, dm.mean(dice_rows(pp, Gp, weights.dice_eps)))

    total = None
    for t in parts:
        total = t if total is None else dm.add(total, t)
    return total, LayerLoss(terms, assignment)


def total_loss(outputs: Sequence, target_masks: np.ndarray, target_labels: np.ndarray, num_classes: int,
               weights: LossWeights, thing_rows: Optional[np.ndarray] = None):
    """Sum of per-layer losses; layer 0 carries no classification term.

    Returns (scalar tensor, list of LayerLoss)."""
    if weights.position_things_only and thing_rows is None:
        raise ValueError("position_things_only needs thing_rows")
    if not weights.position_things_only:
        thing_rows = None
    tape = outputs[0].M.tape
    total = None
    per_layer = []
    for l, out in enumerate(outputs):
        t, info = layer_loss(out, target_masks, target_labels, num_classes, weights, l > 0, thing_rows)
        per_layer.append(info)
        if t is not None:
            total = t if total is None else dm.add(total, t)
    if total is None:
        total = tape.const(0.0)
    return total, per_layer
