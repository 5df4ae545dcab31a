"""Panoptic inference and metrics: PQ/SQ/RQ, PQ-dagger, mIoU, Oracle RQ, AIS distances, relative scale.

Everything is evaluated at voxel resolution.  Per-scene statistics are plain
counts (:class:`PQStats`) so scenes can be merged by addition before any
ratio is formed.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .pointcloud import ClassCatalog

MATCH_IOU = 0.5
ORACLE_IOU = 0.5


@dataclass
class PanopticPrediction:
    voxel_class: np.ndarray  # (V,) class id, ignore id where unlabeled
    voxel_segment: np.ndarray  # (V,) segment id, 0 where unlabeled
    segments: List[dict]  # {"id", "class", "query", "confidence"}
    survivors: List[int] = field(default_factory=list)  # queries kept after overlap filtering

    def point_labels(self, scene, cloud) -> Tuple[np.ndarray, np.ndarray]:
        from .voxelizer import devoxelize

        return devoxelize(self.voxel_class, scene, cloud), devoxelize(self.voxel_segment, scene, cloud)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def panoptic_inference(C: np.ndarray, M: np.ndarray, catalog: ClassCatalog,
                       conf_threshold: float = 0.4, keep_ratio: float = 0.8) -> PanopticPrediction:
    """Turn final-layer logits (C: N x (K+1), M: N x V) into a voxel partition.

    Queries with max sigmoid confidence <= ``conf_threshold`` or whose best class is
    no-object are dropped; voxels go to the argmax surviving mask; a survivor whose
    kept area covers less than ``keep_ratio`` of its positive area is removed
    (ascending confidence, single pass) and its voxels re-assigned.
    """
    C = np.asarray(C, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    N, V = M.shape
    K = C.shape[1] - 1
    probs = _sigmoid(C)
    best = probs.argmax(axis=1)
    conf = probs.max(axis=1)
    survivors = [q for q in range(N) if best[q] != K and conf[q] > conf_threshold]

    def assign(alive):
        if not alive:
            return np.full(V, -1)
        sub = M[alive]
        return np.asarray(alive)[sub.argmax(axis=0)]

    owner = assign(survivors)
    for q in sorted(survivors, key=lambda q: (conf[q], q)):
        original = M[q] > 0
        area = int(original.sum())
        kept = int(((owner == q) & original).sum())
        if area == 0 or kept / area < keep_ratio:
            survivors = [s for s in survivors if s != q]
            owner = assign(survivors)

    evaluated = catalog.evaluated
    voxel_class = np.full(V, catalog.ignore_id, dtype=np.int64)
    voxel_segment = np.zeros(V, dtype=np.int64)
    segments: List[dict] = []
    stuff_ids: Dict[int, int] = {}
    next_id = 1
    for q in sorted(set(survivors)):
        region = owner == q
        if not region.any():
            continue
        cls = evaluated[best[q]]
        if catalog.is_thing(cls):
            sid = next_id
            next_id += 1
            segments.append({"id": sid, "class": cls, "query": q, "confidence": float(conf[q])})
        elif cls in stuff_ids:
            sid = stuff_ids[cls]
            seg = next(s for s in segments if s["id"] == sid)
            seg["confidence"] = max(seg["confidence"], float(conf[q]))
        else:
            sid = stuff_ids[cls] = next_id
            next_id += 1
            segments.append({"id": sid, "class": cls, "query": q, "confidence": float(conf[q])})
        voxel_class[region] = cls
        voxel_segment[region] = sid
    return PanopticPrediction(voxel_class, voxel_segment, segments, sorted(set(survivors)))


def ground_truth_panoptic(scene) -> Tuple[np.ndarray, np.ndarray]:
    """(class, segment id) per voxel from a scene with targets; segment ids start at 1."""
    seg = np.zeros(scene.num_voxels, dtype=np.int64)
    for s, m in enumerate(scene.masks):
        seg[m] = s + 1
    return scene.semantic.copy(), seg


def point_ground_truth(cloud, catalog: ClassCatalog) -> Tuple[np.ndarray, np.ndarray]:
    """(class, segment id) per point: one segment per stuff class and per things instance."""
    cls = np.asarray(cloud.semantic, dtype=np.int64)
    inst = np.asarray(cloud.instance, dtype=np.int64)
    seg = np.zeros(len(cls), dtype=np.int64)
    keys = np.stack([cls, np.where(np.isin(cls, sorted(catalog.things)), inst, 0)], axis=1)
    labelled = cls != catalog.ignore_id
    if labelled.any():
        _, inv = np.unique(keys[labelled], axis=0, return_inverse=True)
        seg[labelled] = inv.ravel() + 1
    return cls, seg


def oracle_prediction(scene) -> PanopticPrediction:
    cls, seg = ground_truth_panoptic(scene)
    segs = [{"id": s + 1, "class": int(c), "query": -1, "confidence": 1.0} for s, c in enumerate(scene.segment_classes)]
    return PanopticPrediction(cls, seg, segs)


# --- accumulable statistics ---------------------------------------------------


@dataclass
class PQStats:
    tp: Dict[int, int] = field(default_factory=dict)
    fp: Dict[int, int] = field(default_factory=dict)
    fn: Dict[int, int] = field(default_factory=dict)
    iou_sum: Dict[int, float] = field(default_factory=dict)
    inter: Dict[int, int] = field(default_factory=dict)  # semantic IoU numerators
    union: Dict[int, int] = field(default_factory=dict)
    oracle_tp: Dict[int, int] = field(default_factory=dict)
    oracle_fp: Dict[int, int] = field(default_factory=dict)
    oracle_fn: Dict[int, int] = field(default_factory=dict)
    ais_pairs: List[Tuple[float, float, float, float]] = field(default_factory=list)  # |dx|, |dy|, |drho|, |dtheta|
    relative_scales: List[float] = field(default_factory=list)

    def __iadd__(self, other: "PQStats") -> "PQStats":
        for name in ("tp", "fp", "fn", "iou_sum", "inter", "union", "oracle_tp", "oracle_fp", "oracle_fn"):
            mine, theirs = getattr(self, name), getattr(other, name)
            for k, v in theirs.items():
                mine[k] = mine.get(k, 0) + v
        self.ais_pairs.extend(other.ais_pairs)
        self.relative_scales.extend(other.relative_scales)
        return self


def _segments(cls, seg):
    ids = np.unique(seg[seg > 0])
    return {int(i): int(cls[seg == i][0]) for i in ids}


def _overlaps(pred_seg, gt_seg, valid):
    """Intersection counts between (pred id, gt id) over ``valid`` voxels."""
    pairs: Dict[Tuple[int, int], int] = {}
    ps, gs = pred_seg[valid], gt_seg[valid]
    both = (ps > 0) & (gs > 0)
    if both.any():
        keys, counts = np.unique(np.stack([ps[both], gs[both]], axis=1), axis=0, return_counts=True)
        pairs = {(int(a), int(b)): int(c) for (a, b), c in zip(keys, counts)}
    return pairs


def compute_pq(pred_class, pred_seg, gt_class, gt_seg, catalog: ClassCatalog) -> PQStats:
    """TP/FP/FN and IoU sums per class; a match needs the same class and IoU > 0.5.

    Voxels whose ground truth is the ignore class are left out of unions, and a
    prediction lying mostly on them is not counted as a false positive.
    """
    pred_class, pred_seg = np.asarray(pred_class), np.asarray(pred_seg)
    gt_class, gt_seg = np.asarray(gt_class), np.asarray(gt_seg)
    stats = PQStats()
    void = gt_class == catalog.ignore_id
    pred_seg = np.where(pred_class == catalog.ignore_id, 0, pred_seg)
    gt_seg = np.where(void, 0, gt_seg)
    preds = _segments(pred_class, pred_seg)
    gts = _segments(gt_class, gt_seg)
    pred_area = {p: int((pred_seg == p).sum()) for p in preds}
    pred_void = {p: int(((pred_seg == p) & void).sum()) for p in preds}
    gt_area = {g: int((gt_seg == g).sum()) for g in gts}
    inter = _overlaps(pred_seg, gt_seg, np.ones(len(gt_seg), bool))

    for c in catalog.evaluated:
        for d in (stats.tp, stats.fp, stats.fn, stats.iou_sum):
            d[c] = 0
    matched_p, matched_g = set(), set()
    for (p, g), i in sorted(inter.items()):
        if preds[p] != gts[g]:
            continue
        union = pred_area[p] - pred_void[p] + gt_area[g] - i
        iou = i / union
        if iou > MATCH_IOU:
            c = gts[g]
            stats.tp[c] += 1
            stats.iou_sum[c] += iou
            matched_p.add(p)
            matched_g.add(g)
    for g, c in gts.items():
        if g not in matched_g and c in stats.fn:
            stats.fn[c] += 1
    for p, c in preds.items():
        if p in matched_p or c not in stats.fp:
            continue
        if pred_void[p] / pred_area[p] > 0.5:
            continue
        stats.fp[c] += 1

    # semantic IoU
    valid = ~void
    for c in catalog.evaluated:
        pc, gc = (pred_class == c) & valid, (gt_class == c) & valid
        stats.inter[c] = int((pc & gc).sum())
        stats.union[c] = int((pc | gc).sum())

    # oracle matching: a GT instance counts if one predicted segment covers > half of it
    for c in sorted(catalog.things):
        gt_ids = [g for g, gc in gts.items() if gc == c]
        pr_ids = [p for p, pc in preds.items() if pc == c]
        covered_g, covering_p = set(), set()
        for g in gt_ids:
            for p in pr_ids:
                if inter.get((p, g), 0) / gt_area[g] > ORACLE_IOU:
                    covered_g.add(g)
                    covering_p.add(p)
        stats.oracle_tp[c] = len(covered_g)
        stats.oracle_fn[c] = len(gt_ids) - len(covered_g)
        stats.oracle_fp[c] = sum(
            1 for p in pr_ids if p not in covering_p and p not in matched_p and pred_void[p] / pred_area[p] <= 0.5
        )
    return stats


def oracle_rq(stats: PQStats, catalog: ClassCatalog) -> Optional[float]:
    """Mean over things classes present in the ground truth of the RQ formed with oracle counts."""
    vals = []
    for c in sorted(catalog.things):
        tp, fp, fn = stats.oracle_tp.get(c, 0), stats.oracle_fp.get(c, 0), stats.oracle_fn.get(c, 0)
        if tp + fn == 0:
            continue
        vals.append(tp / (tp + 0.5 * fp + 0.5 * fn))
    return float(np.mean(vals)) if vals else None


def _wrap_angle(d):
    d = abs(d) % (2 * math.pi)
    return 2 * math.pi - d if d > math.pi else d


def ais_error_distances(pred_class, pred_seg, gt_seg, gt_is_thing: Dict[int, bool],
                        centroids: Dict[int, np.ndarray], catalog: ClassCatalog):
    """Pairs of ground-truth instances swallowed by one predicted things segment.

    Each GT instance is attributed to the predicted things segment overlapping it
    most (ties to the smaller id).  Returns (pairs, means) where pairs holds
    (|dx|, |dy|, |drho|, |dtheta|) between instance centroids and means is None
    when there are no pairs.
    """
    pred_seg = np.asarray(pred_seg)
    things_pred = np.isin(np.asarray(pred_class), sorted(catalog.things)) & (pred_seg > 0)
    by_pred: Dict[int, List[int]] = {}
    for g, is_thing in sorted(gt_is_thing.items()):
        if not is_thing:
            continue
        hit = pred_seg[(np.asarray(gt_seg) == g) & things_pred]
        if len(hit) == 0:
            continue
        ids, counts = np.unique(hit, return_counts=True)
        by_pred.setdefault(int(ids[np.argmax(counts)]), []).append(g)
    pairs = []
    for members in by_pred.values():
        for i in range(len(members)):
            for j in range(i + 1, len(members)):
                a, b = centroids[members[i]], centroids[members[j]]
                ra, rb = math.hypot(a[0], a[1]), math.hypot(b[0], b[1])
                ta, tb = math.atan2(a[1], a[0]), math.atan2(b[1], b[0])
                pairs.append((abs(a[0] - b[0]), abs(a[1] - b[1]), abs(ra - rb), _wrap_angle(ta - tb)))
    return pairs, summarize_ais(pairs)


def summarize_ais(pairs) -> Optional[Dict[str, float]]:
    if not pairs:
        return None
    arr = np.asarray(pairs)
    return {"x": float(arr[:, 0].mean()), "y": float(arr[:, 1].mean()),
            "rho": float(arr[:, 2].mean()), "theta": float(arr[:, 3].mean())}


def relative_scale(masks, num_voxels: Optional[int] = None) -> Optional[float]:
    """Mean of sqrt(positive area / scene area) over masks with at least one positive voxel.

    ``masks`` is boolean (N x V) or logits, where positive means > 0."""
    m = np.asarray(masks)
    if m.ndim == 1:
        m = m[None, :]
    if m.size == 0:
        return None
    pos = (m > 0) if m.dtype != bool else m
    V = num_voxels if num_voxels is not None else m.shape[1]
    if V <= 0:
        raise ValueError("scene area must be positive")
    areas = pos.sum(axis=1)
    areas = areas[areas > 0]
    if len(areas) == 0:
        return None
    return float(np.mean(np.sqrt(areas / V)))


def compute_miou(pred_class, gt_class, catalog: ClassCatalog) -> Tuple[Dict[int, float], Optional[float]]:
    stats = PQStats()
    void = np.asarray(gt_class) == catalog.ignore_id
    valid = ~void
    for c in catalog.evaluated:
        pc, gc = (np.asarray(pred_class) == c) & valid, (np.asarray(gt_class) == c) & valid
        stats.inter[c] = int((pc & gc).sum())
        stats.union[c] = int((pc | gc).sum())
    per = class_iou(stats)
    return per, (float(np.mean(list(per.values()))) if per else None)


def class_iou(stats: PQStats) -> Dict[int, float]:
    return {c: stats.inter[c] / u for c, u in sorted(stats.union.items()) if u > 0}


# --- report -----------------------------------------------------------------


@dataclass
class PQReport:
    per_class: Dict[int, dict]
    aggregate: Dict[str, Optional[float]]
    diagnostics: Dict[str, object]

    def to_json(self) -> str:
        doc = {
            "classes": {str(c): rec for c, rec in self.per_class.items()},
            "aggregate": self.aggregate,
            "diagnostics": self.diagnostics,
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for c, rec in self.per_class.items():
            w.writerow(["class", c, rec["name"], rec["kind"], rec["tp"], rec["fp"], rec["fn"],
                        _fmt(rec["iou_sum"]), _fmt(rec["sq"]), _fmt(rec["rq"]), _fmt(rec["pq"]),
                        _fmt(rec["pq_dagger"]), _fmt(rec["iou"])])
        agg = self.aggregate
        for scope, suffix in (("all", ""), ("things", "_th"), ("stuff", "_st")):
            w.writerow([scope, "", "", scope, "", "", "", "", _fmt(agg.get("sq" + suffix)),
                        _fmt(agg.get("rq" + suffix)), _fmt(agg.get("pq" + suffix)),
                        _fmt(agg.get("pq_dagger")) if scope == "all" else "",
                        _fmt(agg.get("miou")) if scope == "all" else ""])
        return buf.getvalue()

    def diagnostics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in _flatten(self.diagnostics):
            w.writerow([k, _fmt(v)])
        return buf.getvalue()


CSV_COLUMNS = ["row", "class_id", "name", "kind", "tp", "fp", "fn", "iou_sum", "sq", "rq", "pq", "pq_dagger", "iou"]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _flatten(d, prefix=""):
    for k in sorted(d):
        v = d[k]
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            yield from _flatten(v, key + ".")
        elif isinstance(v, (list, tuple)):
            if v and not isinstance(v[0], (list, tuple, dict)):
                for i, x in enumerate(v):
                    yield f"{key}.{i}", x
        else:
            yield key, v


def _mean(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def summarize(stats: PQStats, catalog: ClassCatalog, extra: Optional[Dict[str, object]] = None) -> PQReport:
    """Per-class SQ/RQ/PQ and class averages over classes present in the ground truth."""
    ious = class_iou(stats)
    per_class: Dict[int, dict] = {}
    for c in catalog.evaluated:
        tp, fp, fn = stats.tp.get(c, 0), stats.fp.get(c, 0), stats.fn.get(c, 0)
        iou_sum = stats.iou_sum.get(c, 0.0)
        sq = iou_sum / tp if tp else 0.0
        rq = tp / (tp + 0.5 * fp + 0.5 * fn) if tp else 0.0
        pq = sq * rq
        thing = catalog.is_thing(c)
        per_class[c] = {
            "name": catalog.names.get(c, str(c)),
            "kind": "thing" if thing else "stuff",
            "present": tp + fn > 0,
            "tp": tp, "fp": fp, "fn": fn, "iou_sum": iou_sum,
            "sq": sq, "rq": rq, "pq": pq,
            "iou": ious.get(c),
            "pq_dagger": pq if thing else ious.get(c, 0.0),
        }
    present = [c for c in catalog.evaluated if per_class[c]["present"]]
    th = [c for c in present if catalog.is_thing(c)]
    st = [c for c in present if not catalog.is_thing(c)]
    agg: Dict[str, Optional[float]] = {}
    for scope, cls in (("", present), ("_th", th), ("_st", st)):
        for m in ("pq", "sq", "rq"):
            agg[m + scope] = _mean([per_class[c][m] for c in cls])
    agg["pq_dagger"] = _mean([per_class[c]["pq_dagger"] for c in present])
    agg["miou"] = _mean(list(ious.values()))
    diags: Dict[str, object] = {
        "oracle_rq_th": oracle_rq(stats, catalog),
        "ais_pairs": len(stats.ais_pairs),
        "ais_mean": summarize_ais(stats.ais_pairs),
        "relative_scale": _mean(stats.relative_scales),
    }
    if agg["rq_th"] is not None and diags["oracle_rq_th"] is not None:
        diags["oracle_gap_th"] = diags["oracle_rq_th"] - agg["rq_th"]
    if extra:
        diags.update(extra)
    return PQReport(per_class, agg, diags)


def evaluate_scene(pred: PanopticPrediction, scene, catalog: ClassCatalog, masks_for_scale=None) -> PQStats:
    """All statistics for one scene with targets."""
    from .voxelizer import segment_centroids

    gt_class, gt_seg = ground_truth_panoptic(scene)
    stats = compute_pq(pred.voxel_class, pred.voxel_segment, gt_class, gt_seg, catalog)
    cents = segment_centroids(scene)
    is_thing = {s + 1: bool(catalog.is_thing(int(c))) for s, c in enumerate(scene.segment_classes)}
    centroids = {s + 1: cents[s] for s in range(len(cents))}
    pairs, _ = ais_error_distances(pred.voxel_class, pred.voxel_segment, gt_seg, is_thing, centroids, catalog)
    stats.ais_pairs.extend(pairs)
    if masks_for_scale is not None:
        rs = relative_scale(masks_for_scale, scene.num_voxels)
        if rs is not None:
            stats.relative_scales.append(rs)
    return stats
