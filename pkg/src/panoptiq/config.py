"""Flat ``key = value`` run configuration, hashing and seed expansion."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from typing import Dict, List, Tuple

from .embedding import EmbedConfig
from .matchloss import LossWeights
from .pointcloud import SceneSpec, _parse_float
from .seghead import HeadConfig
from .voxelizer import VoxelConfig

MASK64 = (1 << 64) - 1
TRUE = ("1", "true", "yes", "on")
FALSE = ("0", "false", "no", "off")


class ConfigError(ValueError):
    pass


def parse_text(text: str) -> Dict[str, str]:
    """``key = value`` pairs; ``#`` starts a comment and ``;`` separates pairs on one line."""
    out: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0]
        for chunk in line.split(";"):
            chunk = chunk.strip()
            if not chunk:
                continue
            if "=" not in chunk:
                raise ConfigError(f"line {lineno}: expected key = value, got {chunk!r}")
            key, value = (s.strip() for s in chunk.split("=", 1))
            if not key:
                raise ConfigError(f"line {lineno}: empty key")
            out[key] = value
    return out


def _bool(key, raw):
    low = raw.strip().lower()
    if low in TRUE:
        return True
    if low in FALSE:
        return False
    raise ConfigError(f"{key}: expected a boolean, got {raw!r}")


def _pair(key, raw) -> Tuple[float, float]:
    parts = [p for p in raw.replace(",", " ").split()]
    if len(parts) != 2:
        raise ConfigError(f"{key}: expected two numbers, got {raw!r}")
    try:
        return _parse_float(parts[0]), _parse_float(parts[1])
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


@dataclass(frozen=True)
class OptimConfig:
    optimizer: str = "adamw"  # adamw | sgd (momentum)
    lr: float = 0.0003
    momentum: float = 0.9
    decay_epoch: int = 20
    decay: float = 0.2
    epochs: int = 30
    batch: int = 1
    weight_decay: float = 0.0
    clip: float = 0.0  # global gradient-norm clip, 0 disables

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adamw"):
            raise ConfigError(f"optim.optimizer must be sgd or adamw, got {self.optimizer!r}")
        if self.lr <= 0 or self.epochs < 0 or self.batch < 1:
            raise ConfigError("optim.lr must be positive, optim.epochs >= 0, optim.batch >= 1")


@dataclass(frozen=True)
class DataConfig:
    train: str = ""
    test: str = ""
    count: int = 8  # scenes written by gen-data
    train_count: int = 200  # in-memory datasets (ablate)
    test_count: int = 50
    augment: bool = False
    test_layout: str = ""  # layout override for held-out scenes, empty keeps scene.layout


@dataclass(frozen=True)
class EvalConfig:
    conf: float = 0.4
    keep_ratio: float = 0.8


@dataclass(frozen=True)
class AblateConfig:
    modes: Tuple[str, ...] = ("cartesian", "polar", "mixed")
    pa_seg: Tuple[bool, ...] = (True,)
    mfa: Tuple[bool, ...] = (True,)
    seeds: int = 1


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    voxel: VoxelConfig = field(default_factory=VoxelConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    # --- serialization ---------------------------------------------------

    def to_mapping(self) -> Dict[str, str]:
        kv = {"seed": str(self.seed)}
        v = self.voxel
        kv.update({"voxel.rho": _fmt(v.rho_range), "voxel.theta": _fmt(v.theta_range), "voxel.z": _fmt(v.z_range),
                   "voxel.grid": _fmt(v.grid), "voxel.drop_out_of_range": _fmt(v.drop_out_of_range)})
        for f in fields(EmbedConfig):
            kv[f"embed.{f.name}"] = _fmt(getattr(self.head.embed, f.name))
        for f in fields(HeadConfig):
            if f.name != "embed":
                kv[f"head.{f.name}"] = _fmt(getattr(self.head, f.name))
        for prefix, obj in (("loss", self.loss), ("optim", self.optim), ("scene", self.scene),
                            ("data", self.data), ("eval", self.eval), ("ablate", self.ablate)):
            for f in fields(obj):
                if prefix == "scene" and f.name == "seed":
                    continue
                kv[f"{prefix}.{f.name}"] = _fmt(getattr(obj, f.name))
        return kv

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in sorted(self.to_mapping().items()))

    def model_hash(self) -> str:
        """Digest of everything that shapes the network and its inputs."""
        kv = self.to_mapping()
        keys = [k for k in sorted(kv) if k.split(".")[0] in ("voxel", "embed", "head")]
        return hashlib.sha256("".join(f"{k}={kv[k]}\n" for k in keys).encode()).hexdigest()[:16]

    def full_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    @classmethod
    def from_mapping(cls, kv: Dict[str, str]) -> "RunConfig":
        known = set(cls().to_mapping())
        unknown = sorted(k for k in kv if k not in known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return _build(kv)
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        return cls.from_mapping(parse_text(text))

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_text(fh.read())

    def with_overrides(self, **kv) -> "RunConfig":
        m = self.to_mapping()
        m.update({k.replace("__", "."): _fmt(v) for k, v in kv.items()})
        return RunConfig.from_mapping(m)


def _typed(cls, kv, prefix, skip=()):
    out = {}
    for f in fields(cls):
        key = f"{prefix}.{f.name}"
        if f.name in skip or key not in kv:
            continue
        raw, default = kv[key], f.default
        if isinstance(default, bool):
            out[f.name] = _bool(key, raw)
        elif isinstance(default, int):
            out[f.name] = int(raw)
        elif isinstance(default, float):
            out[f.name] = _parse_float(raw)
        elif isinstance(default, tuple) and default and isinstance(default[0], bool):
            out[f.name] = tuple(_bool(key, x) for x in raw.replace(",", " ").split())
        elif isinstance(default, tuple):
            out[f.name] = tuple(x.strip() for x in raw.split(",") if x.strip())
        else:
            out[f.name] = raw
    return out


def _build(kv: Dict[str, str]) -> RunConfig:
    seed = int(kv.get("seed", "0"))
    if not 0 <= seed <= MASK64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    vk = {}
    if "voxel.rho" in kv:
        vk["rho_range"] = _pair("voxel.rho", kv["voxel.rho"])
    if "voxel.theta" in kv:
        vk["theta_range"] = _pair("voxel.theta", kv["voxel.theta"])
    if "voxel.z" in kv:
        vk["z_range"] = _pair("voxel.z", kv["voxel.z"])
    if "voxel.grid" in kv:
        vk["grid"] = tuple(int(x) for x in kv["voxel.grid"].replace(",", " ").split())
    if "voxel.drop_out_of_range" in kv:
        vk["drop_out_of_range"] = _bool("voxel.drop_out_of_range", kv["voxel.drop_out_of_range"])
    embed = EmbedConfig(**_typed(EmbedConfig, kv, "embed"))
    head = HeadConfig(embed=embed, **_typed(HeadConfig, kv, "head", skip=("embed",)))
    scene_kv = {k: v for k, v in kv.items() if k.startswith("scene.")}
    return RunConfig(
        seed=seed,
        voxel=VoxelConfig(**vk),
        head=head,
        loss=LossWeights(**_typed(LossWeights, kv, "loss")),
        optim=OptimConfig(**_typed(OptimConfig, kv, "optim")),
        scene=SceneSpec.from_mapping(scene_kv),
        data=DataConfig(**_typed(DataConfig, kv, "data")),
        eval=EvalConfig(**_typed(EvalConfig, kv, "eval")),
        ablate=AblateConfig(**_typed(AblateConfig, kv, "ablate")),
    )


# --- seeds -------------------------------------------------------------------

COMPONENTS = ("init", "train_data", "test_data", "augment", "order")


def splitmix64(state: int) -> Tuple[int, int]:
    """One splitmix64 step: returns (next state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def expand_seed(master: int, count: int) -> List[int]:
    """First ``count`` outputs of splitmix64 started at ``master``."""
    out, state = [], int(master) & MASK64
    for _ in range(count):
        state, z = splitmix64(state)
        out.append(z)
    return out


def component_seeds(master: int) -> Dict[str, int]:
    """Per-component seeds: output i of the expansion goes to ``COMPONENTS[i]``."""
    return dict(zip(COMPONENTS, expand_seed(master, len(COMPONENTS))))


def run_seed(master: int, replicate: int) -> int:
    """Master seed for replicate ``replicate`` of an ablation variant."""
    return expand_seed(master ^ 0xA5A5A5A5A5A5A5A5, replicate + 1)[replicate]
