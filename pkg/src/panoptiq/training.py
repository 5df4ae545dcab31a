"""Datasets, the training loop, checkpoints and model evaluation."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import diffmath as dm
from .config import RunConfig, component_seeds, expand_seed
from .matchloss import total_loss
from .panoptic_eval import (PQReport, PQStats, compute_pq, evaluate_scene, oracle_prediction, panoptic_inference,
                            point_ground_truth, relative_scale, summarize)
from .pointcloud import (DEFAULT_CATALOG, AugmentRanges, ClassCatalog, PointCloud, augment, generate_scene,
                         read_cloud, write_cloud)
from .seghead import bind_params, forward_pass, init_params
from .voxelizer import VoxelScene, build_targets, voxelize

log = logging.getLogger("panoptiq")

CKPT_MAGIC = b"PNQCKPT\x00"
CKPT_VERSION = 1


class NumericError(RuntimeError):
    """A loss term or gradient became non-finite."""


# --- datasets ----------------------------------------------------------------


def generate_dataset(cfg: RunConfig, count: int, seed: int, prefix: str = "frame",
                     layout: Optional[str] = None) -> Tuple[List[PointCloud], List[int]]:
    spec = replace(cfg.scene, layout=layout) if layout else cfg.scene
    seeds = expand_seed(seed, count)
    clouds = [generate_scene(spec.with_seed(s), f"{prefix}_{i:05d}") for i, s in enumerate(seeds)]
    return clouds, seeds


def write_dataset(directory, clouds: Sequence[PointCloud], seeds: Sequence[int], cfg: RunConfig,
                  force: bool = False) -> Path:
    d = Path(directory)
    if d.exists() and any(d.iterdir()) and not force:
        raise FileExistsError(f"{d} exists and is not empty (use --force to overwrite)")
    d.mkdir(parents=True, exist_ok=True)
    for old in d.glob("*.cloud"):
        old.unlink()
    frames = []
    for cloud, seed in zip(clouds, seeds):
        name = f"{cloud.frame_id}.cloud"
        write_cloud(cloud, d / name)
        frames.append({"frame_id": cloud.frame_id, "file": name, "seed": int(seed), "points": len(cloud)})
    manifest = {"frames": frames, "count": len(frames), "scene": {k: v.split(", ") if ", " in v else v
                for k, v in cfg.to_mapping().items() if k.startswith("scene.")}}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def read_dataset(directory) -> List[PointCloud]:
    d = Path(directory)
    manifest = d / "manifest.json"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.json in {d}")
    frames = json.loads(manifest.read_text())["frames"]
    return [read_cloud(d / f["file"], f["frame_id"]) for f in frames]


@dataclass
class Prepared:
    scene: VoxelScene
    labels: np.ndarray  # head index per target segment
    thing_rows: np.ndarray  # bool per target segment


def prepare(cloud: PointCloud, cfg: RunConfig, catalog: ClassCatalog = DEFAULT_CATALOG) -> Prepared:
    scene = build_targets(voxelize(cloud, cfg.voxel), cloud, catalog)
    if len(scene.masks) > cfg.head.queries:
        raise ValueError(f"frame {cloud.frame_id!r} has {len(scene.masks)} segments, more than "
                         f"{cfg.head.queries} queries")
    labels = np.array([catalog.head_index(int(c)) for c in scene.segment_classes], dtype=np.int64)
    things = np.array([catalog.is_thing(int(c)) for c in scene.segment_classes], dtype=bool)
    return Prepared(scene, labels, things)


# --- optimizers --------------------------------------------------------------


class SGD:
    def __init__(self, params, momentum=0.9, weight_decay=0.0):
        self.momentum, self.wd = momentum, weight_decay
        self.vel = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads, lr):
        for k, g in grads.items():
            if self.wd:
                g = g + self.wd * params[k]
            self.vel[k] = self.momentum * self.vel[k] + g
            params[k] = params[k] - lr * self.vel[k]


class AdamW:
    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.b1, self.b2 = betas
        self.eps, self.wd, self.t = eps, weight_decay, 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads, lr):
        self.t += 1
        c1, c2 = 1 - self.b1 ** self.t, 1 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            upd = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            params[k] = params[k] - lr * (upd + self.wd * params[k])


def make_optimizer(cfg: RunConfig, params):
    o = cfg.optim
    if o.optimizer == "adamw":
        return AdamW(params, weight_decay=o.weight_decay)
    return SGD(params, o.momentum, o.weight_decay)


# --- training ----------------------------------------------------------------


@dataclass
class TrainResult:
    params: Dict[str, np.ndarray]
    steps: List[dict] = field(default_factory=list)
    epochs: List[dict] = field(default_factory=list)


def scene_loss(params, cfg: RunConfig, item: Prepared, catalog: ClassCatalog = DEFAULT_CATALOG):
    """Forward pass and loss on one scene; returns (tape, loss tensor, per-layer infos, outputs)."""
    tape = dm.Tape()
    P = bind_params(tape, params)
    outs = forward_pass(tape, P, item.scene, cfg.head)
    for l, out in enumerate(outs):
        for name in ("C", "M"):
            if not np.all(np.isfinite(getattr(out, name).value)):
                raise NumericError(f"non-finite {name} logits at layer {l} ({item.scene.frame_id})")
    loss, infos = total_loss(outs, item.scene.masks, item.labels, catalog.num_classes, cfg.loss, item.thing_rows)
    return tape, loss, infos, outs


def _term_totals(infos) -> Dict[str, float]:
    terms: Dict[str, float] = {}
    for l, info in enumerate(infos):
        for name, v in info.terms.items():
            terms[f"layer{l}.{name}"] = v
    return terms


def _check_finite(terms: Dict[str, float], grads: Dict[str, np.ndarray], where: str):
    for name, v in terms.items():
        if not np.isfinite(v):
            raise NumericError(f"non-finite loss term {name} ({where})")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name} ({where})")


def train(cfg: RunConfig, clouds: Sequence[PointCloud], catalog: ClassCatalog = DEFAULT_CATALOG,
          on_step: Optional[Callable[[dict], None]] = None, on_epoch: Optional[Callable[[dict], None]] = None,
          init: Optional[Dict[str, np.ndarray]] = None) -> TrainResult:
    if not clouds:
        raise ValueError("training needs at least one scene")
    seeds = component_seeds(cfg.seed)
    params = init if init is not None else init_params(cfg.head, np.random.default_rng(seeds["init"]))
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    opt = make_optimizer(cfg, params)
    order_rng = np.random.default_rng(seeds["order"])
    aug_rng = np.random.default_rng(seeds["augment"])
    ranges = AugmentRanges()
    cached = None if cfg.data.augment else [prepare(c, cfg, catalog) for c in clouds]
    result = TrainResult(params)
    o = cfg.optim
    step = 0
    for epoch in range(o.epochs):
        lr = o.lr * (o.decay if epoch >= o.decay_epoch else 1.0)
        order = order_rng.permutation(len(clouds))
        sums: Dict[str, float] = {}
        total = 0.0
        for start in range(0, len(order), o.batch):
            batch = order[start:start + o.batch]
            acc = {k: np.zeros_like(v) for k, v in params.items()}
            batch_loss = 0.0
            for i in batch:
                if cached is not None:
                    item = cached[i]
                else:
                    item = prepare(augment(clouds[i], ranges.sample(aug_rng)), cfg, catalog)
                tape, loss, infos, _ = scene_loss(params, cfg, item, catalog)
                grads = tape.backward(loss)
                terms = _term_totals(infos)
                _check_finite({"total": float(loss.value), **terms}, grads,
                              f"epoch {epoch + 1}, frame {clouds[i].frame_id}")
                for k, g in grads.items():
                    acc[k] += g
                batch_loss += float(loss.value)
                for k, v in terms.items():
                    sums[k] = sums.get(k, 0.0) + v
            scale = 1.0 / len(batch)
            for k in acc:
                acc[k] *= scale
            if o.clip > 0:
                norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in acc.values())))
                if norm > o.clip:
                    for k in acc:
                        acc[k] *= o.clip / norm
            opt.step(params, acc, lr)
            step += 1
            total += batch_loss
            rec = {"kind": "step", "epoch": epoch + 1, "step": step, "loss": batch_loss * scale, "lr": lr,
                   "frames": [clouds[i].frame_id for i in batch]}
            result.steps.append(rec)
            if on_step:
                on_step(rec)
        n = len(clouds)
        erec = {"kind": "epoch", "epoch": epoch + 1, "loss": total / n, "lr": lr,
                "terms": {k: v / n for k, v in sorted(sums.items())}}
        result.epochs.append(erec)
        log.info("epoch %d loss %.6f", epoch + 1, erec["loss"])
        if on_epoch:
            on_epoch(erec)
    result.params = params
    return result


# --- checkpoints -------------------------------------------------------------


def save_checkpoint(path, params: Dict[str, np.ndarray], cfg: RunConfig) -> Tuple[Path, Path]:
    """Flat little-endian float64 blob (magic, version, tensors in key order) plus a JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = sorted(params)
    tensors, offset = [], 0
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        for name in names:
            arr = np.ascontiguousarray(params[name], dtype="<f8")
            fh.write(arr.tobytes())
            tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
    sidecar = path.with_suffix(".json")
    meta = {"version": CKPT_VERSION, "config_hash": cfg.model_hash(), "tensors": tensors,
            "config": cfg.to_mapping()}
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path, sidecar


def load_checkpoint(path, cfg: Optional[RunConfig] = None) -> Tuple[Dict[str, np.ndarray], dict]:
    """Read a checkpoint; with ``cfg`` given, its model hash must match the stored one."""
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    if meta.get("version") != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
    if cfg is not None and meta["config_hash"] != cfg.model_hash():
        raise ValueError(f"config hash mismatch: checkpoint {meta['config_hash']} vs config {cfg.model_hash()}")
    blob = path.read_bytes()
    head = len(CKPT_MAGIC) + 4
    if blob[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    data = np.frombuffer(blob[head:], dtype="<f8")
    params = {}
    for t in meta["tensors"]:
        size = int(np.prod(t["shape"], dtype=np.int64))
        if t["offset"] + size > len(data):
            raise ValueError(f"{path} is truncated")
        params[t["name"]] = data[t["offset"]:t["offset"] + size].reshape(t["shape"]).astype(np.float64)
    return params, meta


# --- evaluation --------------------------------------------------------------


@dataclass
class EvalResult:
    report: PQReport
    scenes: List[dict]
    stats: PQStats


SCENE_COLUMNS = ["frame_id", "voxels", "segments", "pq", "sq", "rq", "pq_th", "pq_st", "miou", "oracle_rq_th",
                 "ais_pairs", "relative_scale"]


def evaluate(params: Optional[Dict[str, np.ndarray]], cfg: RunConfig, clouds: Sequence[PointCloud],
             catalog: ClassCatalog = DEFAULT_CATALOG, oracle: bool = False,
             mpe_dump: Optional[Path] = None) -> EvalResult:
    """Run inference on every cloud and pool the statistics.

    With ``oracle`` the ground truth stands in for the prediction and ``params`` is unused.
    Relative scale per layer is measured on the queries that survive final-layer inference.
    """
    total, points = PQStats(), PQStats()
    rows = []
    layers = cfg.head.layers + 1
    per_layer: List[List[float]] = [[] for _ in range(layers)]
    for cloud in clouds:
        item = prepare(cloud, cfg, catalog)
        scene = item.scene
        if oracle:
            pred = oracle_prediction(scene)
            stats = evaluate_scene(pred, scene, catalog, scene.masks)
        else:
            tape = dm.Tape()
            P = bind_params(tape, params)
            outs = forward_pass(tape, P, scene, cfg.head)
            final = outs[-1]
            pred = panoptic_inference(final.C.value, final.M.value, catalog, cfg.eval.conf, cfg.eval.keep_ratio)
            alive = pred.survivors
            stats = evaluate_scene(pred, scene, catalog, final.M.value[alive] if alive else None)
            if alive:
                for l, out in enumerate(outs):
                    rs = relative_scale(out.M.value[alive], scene.num_voxels)
                    if rs is not None:
                        per_layer[l].append(rs)
            if mpe_dump is not None:
                from .embedding import embed_scene
                mpe = embed_scene(tape, P, scene, cfg.head.embed)
                if mpe is not None:
                    mpe_dump.mkdir(parents=True, exist_ok=True)
                    np.save(mpe_dump / f"{cloud.frame_id}.npy", mpe.value)
        total += stats
        pc, ps = pred.point_labels(scene, cloud)
        points += compute_pq(pc, ps, *point_ground_truth(cloud, catalog), catalog)
        srep = summarize(stats, catalog)
        agg = srep.aggregate
        rows.append({"frame_id": cloud.frame_id, "voxels": scene.num_voxels, "segments": len(scene.masks),
                     "pq": agg["pq"], "sq": agg["sq"], "rq": agg["rq"], "pq_th": agg["pq_th"], "pq_st": agg["pq_st"],
                     "miou": agg["miou"], "oracle_rq_th": srep.diagnostics["oracle_rq_th"],
                     "ais_pairs": len(stats.ais_pairs), "relative_scale": srep.diagnostics["relative_scale"]})
    # point-projected numbers are secondary; the primary metrics stay at voxel resolution
    pagg = summarize(points, catalog).aggregate
    extra = {f"point_{k}": pagg[k] for k in ("pq", "pq_th", "pq_st", "miou")}
    if not oracle:
        extra["relative_scale_layer"] = [float(np.mean(v)) if v else None for v in per_layer]
    return EvalResult(summarize(total, catalog, extra), rows, total)
