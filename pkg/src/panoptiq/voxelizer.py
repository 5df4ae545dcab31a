"""Cylindrical voxelization, per-voxel features, ground-truth targets, back-projection."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .pointcloud import ClassCatalog, PointCloud

RAW_FEATURE_DIM = 10


@dataclass(frozen=True)
class VoxelConfig:
    rho_range: Tuple[float, float] = (0.0, 50.0)
    theta_range: Tuple[float, float] = (-math.pi, math.pi)
    z_range: Tuple[float, float] = (-4.0, 2.0)
    grid: Tuple[int, int, int] = (48, 36, 8)
    drop_out_of_range: bool = False

    def __post_init__(self):
        for name in ("rho_range", "theta_range", "z_range"):
            lo, hi = getattr(self, name)
            if not hi > lo:
                raise ValueError(f"{name} must satisfy low < high, got {(lo, hi)}")
        if len(self.grid) != 3 or min(self.grid) < 1:
            raise ValueError(f"grid resolution must be three positive integers, got {self.grid}")

    @property
    def lows(self) -> np.ndarray:
        return np.array([self.rho_range[0], self.theta_range[0], self.z_range[0]])

    @property
    def highs(self) -> np.ndarray:
        return np.array([self.rho_range[1], self.theta_range[1], self.z_range[1]])

    @property
    def pitch(self) -> np.ndarray:
        return (self.highs - self.lows) / np.array(self.grid)

    def centers(self, index: np.ndarray) -> np.ndarray:
        """Cylindrical centers of voxels with integer index triples."""
        return self.lows + (np.asarray(index) + 0.5) * self.pitch

    def as_dict(self) -> dict:
        return {
            "rho": list(self.rho_range),
            "theta": list(self.theta_range),
            "z": list(self.z_range),
            "grid": list(self.grid),
            "drop_out_of_range": self.drop_out_of_range,
        }


FULL_GRID = VoxelConfig(grid=(480, 360, 32))


def cart_to_cyl(x, y, z):
    """Cartesian to (rho, theta, z) with theta in (-pi, pi]; the origin maps to theta 0."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    rho = np.hypot(x, y)
    theta = np.arctan2(y, x)
    theta = np.where(theta == -np.pi, np.pi, theta)
    theta = np.where(rho == 0, 0.0, theta)
    if theta.ndim == 0:
        return float(rho), float(theta), float(np.asarray(z, dtype=np.float64))
    return rho, theta, np.asarray(z, dtype=np.float64)


@dataclass
class VoxelScene:
    config: VoxelConfig
    index: np.ndarray  # (V, 3) int bin triples, ascending
    cart_mean: np.ndarray  # (V, 3)
    cyl_mean: np.ndarray  # (V, 3)
    refl_mean: np.ndarray  # (V,)
    counts: np.ndarray  # (V,)
    features: np.ndarray  # (V, RAW_FEATURE_DIM)
    point_voxel: np.ndarray  # (n_points,), -1 for dropped points
    clamped: np.ndarray  # (n_points,) bool
    semantic: Optional[np.ndarray] = None  # (V,) majority class, ignore id for unevaluated
    masks: Optional[np.ndarray] = None  # (S, V) bool
    segment_classes: Optional[np.ndarray] = None  # (S,)
    segment_instances: Optional[np.ndarray] = None  # (S,), 0 for stuff segments
    frame_id: str = ""

    @property
    def num_voxels(self) -> int:
        return len(self.index)

    def members(self, v: int) -> np.ndarray:
        return np.flatnonzero(self.point_voxel == v)

    @property
    def has_targets(self) -> bool:
        return self.masks is not None


def voxelize(cloud: PointCloud, config: VoxelConfig = VoxelConfig()) -> VoxelScene:
    n = len(cloud)
    grid = np.array(config.grid)
    if n == 0:
        empty3 = np.zeros((0, 3))
        return VoxelScene(
            config, np.zeros((0, 3), np.int64), empty3, empty3.copy(), np.zeros(0), np.zeros(0, np.int64),
            np.zeros((0, RAW_FEATURE_DIM)), np.zeros(0, np.int64), np.zeros(0, bool), frame_id=cloud.frame_id,
        )
    rho, theta, z = cart_to_cyl(cloud.points[:, 0], cloud.points[:, 1], cloud.points[:, 2])
    cyl = np.stack([rho, theta, z], axis=1)
    raw = np.floor((cyl - config.lows) / (config.highs - config.lows) * grid).astype(np.int64)
    idx = np.clip(raw, 0, grid - 1)
    clamped = np.any((cyl < config.lows) | (cyl > config.highs), axis=1)
    keep = ~clamped if config.drop_out_of_range else np.ones(n, bool)

    key = (idx[:, 0] * grid[1] + idx[:, 1]) * grid[2] + idx[:, 2]
    uniq, inverse = np.unique(key[keep], return_inverse=True)
    point_voxel = np.full(n, -1, np.int64)
    point_voxel[keep] = inverse
    V = len(uniq)
    index = np.stack([uniq // (grid[1] * grid[2]), (uniq // grid[2]) % grid[1], uniq % grid[2]], axis=1)

    counts = np.bincount(inverse, minlength=V)
    kept_pts = cloud.points[keep]
    kept_cyl = cyl[keep]

    def vmean(a):
        return np.stack([np.bincount(inverse, weights=a[:, k], minlength=V) for k in range(a.shape[1])], axis=1) / counts[:, None]

    cart_mean = vmean(kept_pts[:, :3])
    cyl_mean = vmean(kept_cyl)
    refl_mean = vmean(kept_pts[:, 3:4])[:, 0]

    scene = VoxelScene(
        config, index, cart_mean, cyl_mean, refl_mean, counts, np.zeros((V, RAW_FEATURE_DIM)),
        point_voxel, clamped, frame_id=cloud.frame_id,
    )
    scene.features = raw_features(scene)
    return scene


def _to_unit(values, lo, hi):
    return 2.0 * (values - lo) / (hi - lo) - 1.0


def raw_features(scene: VoxelScene) -> np.ndarray:
    """Ten per-voxel statistics, each roughly in [-1, 1]:
    mean x, y (over rho max), z, reflectance; mean rho, theta; log point count;
    offset of the cylindrical mean from the voxel center in pitch units (3)."""
    cfg = scene.config
    rmax = cfg.rho_range[1]
    V = scene.num_voxels
    feats = np.empty((V, RAW_FEATURE_DIM))
    feats[:, 0] = scene.cart_mean[:, 0] / rmax
    feats[:, 1] = scene.cart_mean[:, 1] / rmax
    feats[:, 2] = _to_unit(scene.cart_mean[:, 2], *cfg.z_range)
    feats[:, 3] = scene.refl_mean
    feats[:, 4] = _to_unit(scene.cyl_mean[:, 0], *cfg.rho_range)
    feats[:, 5] = _to_unit(scene.cyl_mean[:, 1], *cfg.theta_range)
    feats[:, 6] = np.log1p(scene.counts)
    feats[:, 7:10] = (scene.cyl_mean - cfg.centers(scene.index)) / cfg.pitch
    return feats


def _majority(voxel_of_point, labels, V):
    """Per-voxel most frequent label; ties go to the smaller label."""
    if V == 0:
        return np.zeros(0, np.int64)
    width = int(labels.max()) + 1 if len(labels) else 1
    table = np.zeros((V, width), np.int64)
    np.add.at(table, (voxel_of_point, labels), 1)
    return table.argmax(axis=1)  # argmax returns the first (smallest) label on ties


def build_targets(scene: VoxelScene, cloud: PointCloud, catalog: ClassCatalog) -> VoxelScene:
    """Attach per-voxel semantics and binary segment masks (things instances, then stuff classes)."""
    V = scene.num_voxels
    kept = scene.point_voxel >= 0
    pv = scene.point_voxel[kept]
    sem_pts = cloud.semantic[kept]
    inst_pts = cloud.instance[kept]
    semantic = _majority(pv, sem_pts, V)
    evaluated = np.array(catalog.evaluated)
    semantic = np.where(np.isin(semantic, evaluated), semantic, catalog.ignore_id)

    # instance vote among the points that carry the voxel's majority class
    agree = sem_pts == semantic[pv]
    inst_major = np.zeros(V, np.int64)
    if V:
        votes = _majority(pv[agree], inst_pts[agree], V)
        has_vote = np.bincount(pv[agree], minlength=V) > 0
        inst_major = np.where(has_vote, votes, 0)
    things = np.array(sorted(catalog.things))
    thing_vox = np.isin(semantic, things)
    orphan = thing_vox & (inst_major == 0)
    semantic = np.where(orphan, catalog.ignore_id, semantic)
    thing_vox &= ~orphan

    masks, classes, insts = [], [], []
    for inst in np.unique(inst_major[thing_vox]):
        m = thing_vox & (inst_major == inst)
        masks.append(m)
        classes.append(int(np.bincount(semantic[m]).argmax()))
        insts.append(int(inst))
    for cls in sorted(catalog.stuff):
        m = semantic == cls
        if m.any():
            masks.append(m)
            classes.append(cls)
            insts.append(0)

    scene.semantic = semantic
    scene.masks = np.array(masks, dtype=bool).reshape(len(masks), V)
    scene.segment_classes = np.array(classes, np.int64)
    scene.segment_instances = np.array(insts, np.int64)
    return scene


def devoxelize(per_voxel_labels: np.ndarray, scene: VoxelScene, cloud: PointCloud, fill=0) -> np.ndarray:
    """Give each point its voxel's label (any trailing shape); dropped points get ``fill``."""
    labels = np.asarray(per_voxel_labels)
    if len(labels) != scene.num_voxels:
        raise ValueError(f"expected {scene.num_voxels} voxel labels, got {len(labels)}")
    if len(cloud) != len(scene.point_voxel):
        raise ValueError("cloud does not match the scene it was voxelized into")
    out = np.full((len(cloud),) + labels.shape[1:], fill, dtype=labels.dtype)
    kept = scene.point_voxel >= 0
    out[kept] = labels[scene.point_voxel[kept]]
    return out


def segment_centroids(scene: VoxelScene) -> np.ndarray:
    """Point-weighted Cartesian centroid of every target segment, (S, 3)."""
    w = scene.masks * scene.counts[None, :]
    return (w @ scene.cart_mean) / np.maximum(w.sum(axis=1, keepdims=True), 1)
