"""Point clouds: data model, text file format, synthetic scenes, augmentation."""
from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass, fields, replace
from typing import Dict, FrozenSet, List, Optional, TextIO, Tuple, Union

import numpy as np

HEADER_TAG = "panoptiq-cloud"
FORMAT_VERSION = "v1"


class CloudFormatError(ValueError):
    pass


class SceneError(ValueError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray  # (n, 4): x, y, z, reflectance
    semantic: np.ndarray  # (n,) int
    instance: np.ndarray  # (n,) int, 0 = no instance
    frame_id: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        self.semantic = np.asarray(self.semantic, dtype=np.int64).reshape(-1)
        self.instance = np.asarray(self.instance, dtype=np.int64).reshape(-1)
        n = len(self.points)
        if len(self.semantic) != n or len(self.instance) != n:
            raise ValueError(
                f"label lengths {len(self.semantic)}/{len(self.instance)} do not match {n} points"
            )
        if np.any(self.instance < 0):
            raise ValueError("instance ids must be non-negative")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        return (
            self.frame_id == other.frame_id
            and np.array_equal(self.points, other.points)
            and np.array_equal(self.semantic, other.semantic)
            and np.array_equal(self.instance, other.instance)
        )

    def validate(self, catalog: "ClassCatalog") -> None:
        bad = (self.instance > 0) & ~np.isin(self.semantic, sorted(catalog.things))
        if np.any(bad):
            raise ValueError(f"{int(bad.sum())} instance points carry a non-thing semantic label")

    @classmethod
    def empty(cls, frame_id: str = "") -> "PointCloud":
        return cls(np.zeros((0, 4)), np.zeros(0, np.int64), np.zeros(0, np.int64), frame_id)


@dataclass(frozen=True)
class ClassCatalog:
    names: Dict[int, str]
    things: FrozenSet[int]
    stuff: FrozenSet[int]
    ignore_id: int = 0

    def __post_init__(self):
        if self.things & self.stuff:
            raise ValueError(f"classes {sorted(self.things & self.stuff)} are both things and stuff")
        if self.ignore_id in self.things | self.stuff:
            raise ValueError("the ignore id cannot be an evaluated class")

    @property
    def evaluated(self) -> List[int]:
        """Evaluated class ids in ascending order; position = head output index."""
        return sorted(self.things | self.stuff)

    @property
    def num_classes(self) -> int:
        return len(self.evaluated)

    def head_index(self, class_id: int) -> int:
        return self.evaluated.index(class_id)

    def is_thing(self, class_id: int) -> bool:
        return class_id in self.things


DEFAULT_CATALOG = ClassCatalog(
    names={0: "unlabeled", 1: "car", 2: "ground", 3: "building"},
    things=frozenset({1}),
    stuff=frozenset({2, 3}),
    ignore_id=0,
)
CAR, GROUND, BUILDING = 1, 2, 3


# --- file format ------------------------------------------------------------


def write_cloud(cloud: PointCloud, dest: Union[str, os.PathLike, TextIO]) -> None:
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "w", encoding="ascii") as fh:
            write_cloud(cloud, fh)
        return
    lines = [f"{HEADER_TAG} {FORMAT_VERSION} n={len(cloud)}"]
    for (x, y, z, r), s, i in zip(cloud.points.tolist(), cloud.semantic.tolist(), cloud.instance.tolist()):
        lines.append(f"{x!r} {y!r} {z!r} {r!r} {s} {i}")
    dest.write("\n".join(lines) + "\n")


def read_cloud(src: Union[str, os.PathLike, TextIO], frame_id: Optional[str] = None) -> PointCloud:
    if isinstance(src, (str, os.PathLike)):
        with open(src, "r", encoding="ascii") as fh:
            fid = frame_id if frame_id is not None else os.path.splitext(os.path.basename(src))[0]
            return read_cloud(fh, fid)
    header = src.readline()
    parts = header.split()
    if len(parts) != 3 or parts[0] != HEADER_TAG or parts[1] != FORMAT_VERSION or not parts[2].startswith("n="):
        raise CloudFormatError(f"line 1: malformed header {header.strip()!r}")
    try:
        n = int(parts[2][2:])
    except ValueError:
        raise CloudFormatError(f"line 1: bad point count {parts[2]!r}") from None
    pts = np.empty((n, 4))
    sem = np.empty(n, np.int64)
    inst = np.empty(n, np.int64)
    k = 0
    for lineno, line in enumerate(src, start=2):
        if not line.strip():
            continue
        cols = line.split()
        if len(cols) != 6:
            raise CloudFormatError(f"line {lineno}: expected 6 columns, got {len(cols)}")
        if k >= n:
            raise CloudFormatError(f"line {lineno}: more points than the header count {n}")
        try:
            vals = [float(c) for c in cols[:4]]
            s, i = int(cols[4]), int(cols[5])
        except ValueError as exc:
            raise CloudFormatError(f"line {lineno}: {exc}") from None
        if not all(math.isfinite(v) for v in vals):
            raise CloudFormatError(f"line {lineno}: non-finite coordinate")
        if i < 0:
            raise CloudFormatError(f"line {lineno}: negative instance id")
        pts[k] = vals
        sem[k] = s
        inst[k] = i
        k += 1
    if k != n:
        raise CloudFormatError(f"header announces {n} points, found {k}")
    return PointCloud(pts, sem, inst, frame_id or "")


def dumps_cloud(cloud: PointCloud) -> str:
    buf = io.StringIO()
    write_cloud(cloud, buf)
    return buf.getvalue()


def loads_cloud(text: str, frame_id: str = "") -> PointCloud:
    return read_cloud(io.StringIO(text), frame_id)


# --- synthetic scenes -------------------------------------------------------


@dataclass(frozen=True)
class SceneSpec:
    """Recipe for one synthetic scene; ``seed`` fixes everything."""

    layout: str = "ring"  # ring | crowd | mixed
    box: Tuple[float, float, float] = (4.0, 2.0, 1.5)  # length (x), width (y), height (m)
    density: float = 6.0  # instance surface points per m^2 before falloff
    count: int = 8  # ring instances (ring/mixed) or crowd instances (crowd)
    crowd_count: int = 9  # crowd instances in the mixed layout
    ring_radius: Tuple[float, float] = (10.0, 20.0)
    phase_jitter: float = 0.15  # rad, shared rotation of the ring slots
    slot_jitter: float = 0.05  # rad, per-instance angular jitter
    crowd_gap: Tuple[float, float] = (1.5, 1.5)  # free space between neighbours along x, y (m)
    crowd_radius: Tuple[float, float] = (12.0, 22.0)
    crowd_sector: Tuple[float, float] = (-math.pi, math.pi)
    ground: Tuple[float, float] = (2.0, 30.0)  # annulus radii (m)
    ground_z: float = -1.8
    ground_density: float = 1.0
    walls: bool = True
    wall_radius: float = 34.0
    wall_height: float = 3.0
    wall_density: float = 0.5
    falloff: float = 0.03  # density multiplier exp(-falloff * rho)
    noise: float = 0.02
    margin: float = 0.5  # min gap between instance footprints (m)
    max_retries: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.layout not in ("ring", "crowd", "mixed"):
            raise ValueError(f"unknown layout {self.layout!r}")
        if min(self.box) <= 0 or self.density <= 0 or self.ground_density < 0:
            raise ValueError("box extents and densities must be positive")
        if self.count < 0 or self.crowd_count < 0:
            raise ValueError("instance counts must be non-negative")
        if not (0 <= self.ground[0] < self.ground[1]):
            raise ValueError("ground annulus must satisfy 0 <= inner < outer")
        if self.ring_radius[0] <= 0 or self.ring_radius[1] < self.ring_radius[0]:
            raise ValueError("ring radius range must be positive and ordered")
        if self.noise < 0 or self.falloff < 0 or self.margin < 0:
            raise ValueError("noise, falloff and margin must be non-negative")

    @property
    def total_instances(self) -> int:
        return self.count + (self.crowd_count if self.layout == "mixed" else 0)

    def with_seed(self, seed: int) -> "SceneSpec":
        return replace(self, seed=int(seed))

    @classmethod
    def from_mapping(cls, kv: Dict[str, str], prefix: str = "scene.") -> "SceneSpec":
        kwargs = {}
        for f in fields(cls):
            key = prefix + f.name
            if key not in kv:
                continue
            raw = kv[key]
            default = f.default
            if isinstance(default, tuple):
                kwargs[f.name] = tuple(_parse_float(x) for x in raw.split(","))
            elif isinstance(default, bool):
                kwargs[f.name] = raw.lower() in ("1", "true", "yes", "on")
            elif isinstance(default, int):
                kwargs[f.name] = int(raw)
            elif isinstance(default, float):
                kwargs[f.name] = _parse_float(raw)
            else:
                kwargs[f.name] = raw
        return cls(**kwargs)


def _parse_float(text: str) -> float:
    t = text.strip().lower()
    sign = -1.0 if t.startswith("-") else 1.0
    body = t.lstrip("+-")
    if body.endswith("pi"):
        mult = body[:-2].rstrip("*") or "1"
        return sign * float(mult) * math.pi
    return float(t)


def _face_samples(rng, center, box, density, falloff):
    """Points on the 4 sides and the top of an axis-aligned box standing on z = center[2]."""
    cx, cy, z0 = center
    L, W, H = box
    rho = math.hypot(cx, cy)
    mult = math.exp(-falloff * rho)
    faces = [
        # (area, sampler)
        (L * W, lambda u, v: (cx + (u - 0.5) * L, cy + (v - 0.5) * W, z0 + H + 0 * u)),
        (L * H, lambda u, v: (cx + (u - 0.5) * L, cy - W / 2 + 0 * u, z0 + v * H)),
        (L * H, lambda u, v: (cx + (u - 0.5) * L, cy + W / 2 + 0 * u, z0 + v * H)),
        (W * H, lambda u, v: (cx - L / 2 + 0 * u, cy + (u - 0.5) * W, z0 + v * H)),
        (W * H, lambda u, v: (cx + L / 2 + 0 * u, cy + (u - 0.5) * W, z0 + v * H)),
    ]
    out = []
    for area, sampler in faces:
        k = rng.poisson(density * area * mult)
        u, v = rng.random(k), rng.random(k)
        out.append(np.stack(sampler(u, v), axis=1))
    return np.concatenate(out, axis=0)


def _footprint(center, box):
    cx, cy, _ = center
    return (cx - box[0] / 2, cx + box[0] / 2, cy - box[1] / 2, cy + box[1] / 2)


def _gap(a, b):
    dx = max(b[0] - a[1], a[0] - b[1])
    dy = max(b[2] - a[3], a[2] - b[3])
    return max(dx, dy)


def _ring_centers(rng, spec: SceneSpec, n: int):
    radius = rng.uniform(*spec.ring_radius)
    phase = rng.uniform(-spec.phase_jitter, spec.phase_jitter)
    centers = []
    for k in range(n):
        ang = phase + 2 * math.pi * k / max(n, 1) + rng.uniform(-spec.slot_jitter, spec.slot_jitter)
        centers.append((radius * math.cos(ang), radius * math.sin(ang), spec.ground_z))
    return centers


def _crowd_centers(rng, spec: SceneSpec, n: int):
    cols = int(math.ceil(math.sqrt(n))) if n else 0
    px = spec.box[0] + spec.crowd_gap[0]
    py = spec.box[1] + spec.crowd_gap[1]
    rho = rng.uniform(*spec.crowd_radius)
    ang = rng.uniform(*spec.crowd_sector)
    ox, oy = rho * math.cos(ang), rho * math.sin(ang)
    centers = []
    for k in range(n):
        r, c = divmod(k, cols)
        rows = int(math.ceil(n / cols))
        centers.append((ox + (c - (cols - 1) / 2) * px, oy + (r - (rows - 1) / 2) * py, spec.ground_z))
    return centers


def _place(rng, spec: SceneSpec):
    for _ in range(spec.max_retries):
        if spec.layout == "ring":
            centers = _ring_centers(rng, spec, spec.count)
        elif spec.layout == "crowd":
            centers = _crowd_centers(rng, spec, spec.count)
        else:
            centers = _ring_centers(rng, spec, spec.count) + _crowd_centers(rng, spec, spec.crowd_count)
        boxes = [_footprint(c, spec.box) for c in centers]
        ok = all(
            _gap(boxes[i], boxes[j]) >= spec.margin for i in range(len(boxes)) for j in range(i + 1, len(boxes))
        )
        ok = ok and all(spec.ground[0] + 0.5 <= math.hypot(c[0], c[1]) <= spec.ground[1] for c in centers)
        if ok:
            return centers
    raise SceneError(f"could not place {spec.total_instances} instances without collision in {spec.max_retries} tries")


def generate_scene(spec: SceneSpec, frame_id: str = "", catalog: ClassCatalog = DEFAULT_CATALOG) -> PointCloud:
    """Sample a labeled synthetic scene: identical boxes on a ring and/or in a grid, over a ground annulus."""
    rng = np.random.default_rng(spec.seed)
    centers = _place(rng, spec) if spec.total_instances else []

    chunks, sems, insts, refl = [], [], [], []
    for k, c in enumerate(centers):
        pts = _face_samples(rng, c, spec.box, spec.density, spec.falloff)
        chunks.append(pts)
        sems.append(np.full(len(pts), CAR))
        insts.append(np.full(len(pts), k + 1))
        refl.append(np.clip(rng.normal(0.7, 0.05, len(pts)), 0.0, 1.0))

    # ground: uniform over the annulus area, thinned with range
    r0, r1 = spec.ground
    area = math.pi * (r1 * r1 - r0 * r0)
    k = rng.poisson(spec.ground_density * area)
    rad = np.sqrt(rng.uniform(r0 * r0, r1 * r1, k))
    ang = rng.uniform(-math.pi, math.pi, k)
    keep = rng.random(k) < np.exp(-spec.falloff * rad)
    gx, gy = rad[keep] * np.cos(ang[keep]), rad[keep] * np.sin(ang[keep])
    under = np.zeros(len(gx), bool)
    for c in centers:
        x0, x1, y0, y1 = _footprint(c, spec.box)
        under |= (gx >= x0 - 0.2) & (gx <= x1 + 0.2) & (gy >= y0 - 0.2) & (gy <= y1 + 0.2)
    gx, gy = gx[~under], gy[~under]
    chunks.append(np.stack([gx, gy, np.full(len(gx), spec.ground_z)], axis=1))
    sems.append(np.full(len(gx), GROUND))
    insts.append(np.zeros(len(gx), np.int64))
    refl.append(np.clip(rng.normal(0.2, 0.05, len(gx)), 0.0, 1.0))

    if spec.walls:
        # half-circle wall behind the ground, opening drawn per scene
        start = rng.uniform(-math.pi, math.pi)
        arc = math.pi * spec.wall_radius
        kw = rng.poisson(spec.wall_density * arc * spec.wall_height * math.exp(-spec.falloff * spec.wall_radius))
        wa = start + rng.uniform(0, math.pi, kw)
        wa = (wa + math.pi) % (2 * math.pi) - math.pi
        wz = spec.ground_z + rng.uniform(0, spec.wall_height, kw)
        chunks.append(np.stack([spec.wall_radius * np.cos(wa), spec.wall_radius * np.sin(wa), wz], axis=1))
        sems.append(np.full(kw, BUILDING))
        insts.append(np.zeros(kw, np.int64))
        refl.append(np.clip(rng.normal(0.45, 0.05, kw), 0.0, 1.0))

    xyz = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, 3))
    if spec.noise > 0:
        xyz = xyz + rng.normal(0.0, spec.noise, xyz.shape)
    points = np.concatenate([xyz, np.concatenate(refl)[:, None]], axis=1)
    cloud = PointCloud(points, np.concatenate(sems), np.concatenate(insts), frame_id)
    cloud.validate(catalog)
    return cloud


def instance_centers(cloud: PointCloud) -> Dict[int, np.ndarray]:
    return {int(i): cloud.xyz[cloud.instance == i].mean(axis=0) for i in np.unique(cloud.instance) if i > 0}


# --- augmentation -----------------------------------------------------------


@dataclass(frozen=True)
class AugmentParams:
    rotation_angle: float = 0.0
    flip_axes: Tuple[bool, bool] = (False, False)  # mirror x, mirror y
    scale_factor: float = 1.0
    noise_sigma: float = 0.0
    seed: int = 0


@dataclass(frozen=True)
class AugmentRanges:
    """Sampling ranges for random training augmentation (declared defaults, not measured values)."""

    rotation: Tuple[float, float] = (-math.pi, math.pi)
    flip_prob: float = 0.5
    scale: Tuple[float, float] = (0.95, 1.05)
    noise: float = 0.02

    def sample(self, rng: np.random.Generator) -> AugmentParams:
        return AugmentParams(
            rotation_angle=float(rng.uniform(*self.rotation)),
            flip_axes=(bool(rng.random() < self.flip_prob), bool(rng.random() < self.flip_prob)),
            scale_factor=float(rng.uniform(*self.scale)),
            noise_sigma=self.noise,
            seed=int(rng.integers(0, 2**63 - 1)),
        )


def augment(cloud: PointCloud, params: AugmentParams) -> PointCloud:
    """Rotate about z, mirror, scale, then jitter coordinates; labels are untouched."""
    if params.scale_factor <= 0:
        raise ValueError("scale_factor must be positive")
    xyz = cloud.xyz.copy()
    if params.rotation_angle:
        c, s = math.cos(params.rotation_angle), math.sin(params.rotation_angle)
        x, y = xyz[:, 0].copy(), xyz[:, 1].copy()
        xyz[:, 0] = c * x - s * y
        xyz[:, 1] = s * x + c * y
    if params.flip_axes[0]:
        xyz[:, 0] = -xyz[:, 0]
    if params.flip_axes[1]:
        xyz[:, 1] = -xyz[:, 1]
    if params.scale_factor != 1.0:
        xyz = xyz * params.scale_factor
    if params.noise_sigma > 0:
        rng = np.random.default_rng(params.seed)
        xyz = xyz + rng.normal(0.0, params.noise_sigma, xyz.shape)
    pts = np.concatenate([xyz, cloud.points[:, 3:4]], axis=1)
    return PointCloud(pts, cloud.semantic.copy(), cloud.instance.copy(), cloud.frame_id)
