"""Central-difference checks of every loss term and of a small end-to-end model."""
from __future__ import annotations

from typing import Dict

import numpy as np

from . import diffmath as dm
from .config import RunConfig
from .embedding import EmbedConfig
from .matchloss import LossWeights, bce_loss, dice_loss, dice_rows, focal_loss, total_loss
from .pointcloud import DEFAULT_CATALOG, SceneSpec, generate_scene
from .seghead import HeadConfig, forward_pass, init_params
from .voxelizer import build_targets, voxelize

STEP = 1e-5


def _loss_checks(rng, points: int) -> Dict[str, float]:
    worst = {"focal": 0.0, "bce": 0.0, "dice": 0.0, "dice_rows": 0.0}
    for _ in range(points):
        shape = (int(rng.integers(1, 4)), int(rng.integers(2, 6)))
        x = rng.normal(0, 2, shape)
        t = (rng.random(shape) < 0.4).astype(float)
        gamma, alpha = float(rng.uniform(0, 3)), float(rng.uniform(0.1, 1))
        eps = float(rng.uniform(0.1, 2))
        graphs = {
            "focal": lambda v: focal_loss(dm.sigmoid(v["x"]), t, gamma, alpha),
            "bce": lambda v: bce_loss(dm.sigmoid(v["x"]), t),
            "dice": lambda v: dice_loss(dm.sigmoid(dm.reshape(v["x"], (x.size,))), t.ravel(), eps),
            "dice_rows": lambda v: dm.mean(dice_rows(dm.sigmoid(v["x"]), t, eps)),
        }
        for name, g in graphs.items():
            worst[name] = max(worst[name], dm.grad_check(g, {"x": x}, step=STEP))
    return worst


def tiny_setup(seed: int = 0, layers: int = 2):
    """A small mixed-embedding model with PA-Seg and MFA on a sparse scene."""
    spec = SceneSpec(count=2, density=1.5, ground_density=0.05, walls=False, seed=seed)
    cloud = generate_scene(spec, "grad")
    scene = build_targets(voxelize(cloud), cloud, DEFAULT_CATALOG)
    cfg = HeadConfig(queries=4, layers=layers, dim=8, ffn_mult=2, embed=EmbedConfig(mode="mixed"))
    labels = np.array([DEFAULT_CATALOG.head_index(int(c)) for c in scene.segment_classes])
    return cfg, scene, labels


def model_graph(cfg: HeadConfig, scene, labels, weights: LossWeights = LossWeights()):
    def graph(P):
        outs = forward_pass(P[next(iter(P))].tape, P, scene, cfg)
        loss, _ = total_loss(outs, scene.masks, labels, DEFAULT_CATALOG.num_classes, weights)
        return loss

    return graph


def _model_check(rng, points: int, coords_per_point: int, seed: int) -> float:
    cfg, scene, labels = tiny_setup(seed)
    graph = model_graph(cfg, scene, labels)
    worst = 0.0
    for _ in range(points):
        params = init_params(cfg, rng)
        # spread the parameters away from the structured initialization
        params = {k: v + rng.normal(0, 0.1, v.shape) for k, v in params.items()}
        names = sorted(params)
        picks: Dict[str, list] = {}
        for _ in range(coords_per_point):
            n = names[int(rng.integers(len(names)))]
            picks.setdefault(n, []).append(int(rng.integers(params[n].size)))
        worst = max(worst, dm.grad_check(graph, params, step=STEP, coords=picks))
    return worst


def check_all(cfg: RunConfig = RunConfig(), points: int = 50, seed: int = 0, coords_per_point: int = 20) -> Dict[str, float]:
    """Max relative error per check; every entry should be below 1e-4."""
    rng = np.random.default_rng(seed)
    out = {f"loss.{k}": float(v) for k, v in _loss_checks(rng, points).items()}
    out["model.mixed_paseg_mfa_L2"] = float(_model_check(rng, points, coords_per_point, seed))
    return out
