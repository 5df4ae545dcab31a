"""Cartesian, polar and mixed positional embeddings of voxel positions."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from . import diffmath as dm
from .voxelizer import VoxelConfig, VoxelScene

MODES = ("cartesian", "polar", "mixed", "none")


@dataclass(frozen=True)
class EmbedConfig:
    mode: str = "mixed"
    normalize: bool = True
    prescale: bool = True
    theta_lift: bool = False  # feed (sin, cos) of theta instead of the scaled angle

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"embed mode must be one of {MODES}, got {self.mode!r}")

    @property
    def uses_cartesian(self) -> bool:
        return self.mode in ("cartesian", "mixed")

    @property
    def uses_polar(self) -> bool:
        return self.mode in ("polar", "mixed")

    @property
    def polar_in(self) -> int:
        return 4 if self.theta_lift else 3


def init_embed_params(dim: int, cfg: EmbedConfig, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """Both branches are always allocated so a checkpoint can switch modes."""
    p = {}
    for branch, fan_in in (("cart", 3), ("polar", cfg.polar_in)):
        p[f"embed.{branch}.w"] = rng.normal(0.0, 1.0, (fan_in, dim))
        p[f"embed.{branch}.b"] = np.zeros(dim)
        p[f"embed.{branch}.gamma"] = np.ones(dim)
        p[f"embed.{branch}.beta"] = np.zeros(dim)
    return p


def positional_coordinates(scene: VoxelScene) -> Tuple[np.ndarray, np.ndarray]:
    """Per-voxel (x, y, z) and (rho, theta, z) means, clamped into the clip ranges."""
    cfg = scene.config
    cyl = np.clip(scene.cyl_mean, cfg.lows, cfg.highs)
    cart = scene.cart_mean.copy()
    r = np.hypot(cart[:, 0], cart[:, 1])
    over = r > cfg.rho_range[1]
    if np.any(over):
        cart[over, :2] *= (cfg.rho_range[1] / r[over])[:, None]
    cart[:, 2] = np.clip(cart[:, 2], *cfg.z_range)
    return cart, cyl


def _unit(v, lo, hi):
    return 2.0 * (v - lo) / (hi - lo) - 1.0


def scale_coordinates(cart: np.ndarray, cyl: np.ndarray, vcfg: VoxelConfig, cfg: EmbedConfig):
    """Map coordinates into [-1, 1] per clip range; rejects anything outside the ranges."""
    tol = 1e-9
    lo, hi = vcfg.lows, vcfg.highs
    if np.any(cyl < lo - tol) or np.any(cyl > hi + tol):
        raise ValueError("polar coordinate outside the clip range")
    rmax = vcfg.rho_range[1]
    if np.any(np.abs(cart[:, :2]) > rmax + tol) or np.any(cart[:, 2] < vcfg.z_range[0] - tol) or np.any(
        cart[:, 2] > vcfg.z_range[1] + tol
    ):
        raise ValueError("cartesian coordinate outside the clip range")
    if not cfg.prescale:
        c_in, p_in = cart, cyl
    else:
        c_in = np.stack([cart[:, 0] / rmax, cart[:, 1] / rmax, _unit(cart[:, 2], *vcfg.z_range)], axis=1)
        p_in = np.stack(
            [_unit(cyl[:, 0], *vcfg.rho_range), _unit(cyl[:, 1], *vcfg.theta_range), _unit(cyl[:, 2], *vcfg.z_range)],
            axis=1,
        )
    if cfg.theta_lift:
        p_in = np.stack([p_in[:, 0], np.sin(cyl[:, 1]), np.cos(cyl[:, 1]), p_in[:, 2]], axis=1)
    return c_in, p_in


def _branch(tape: dm.Tape, P: Mapping[str, dm.Tensor], name: str, coords: np.ndarray, normalize: bool):
    h = dm.linear(tape.const(coords), P[f"embed.{name}.w"], P[f"embed.{name}.b"])
    if normalize:
        h = dm.layernorm(h, P[f"embed.{name}.gamma"], P[f"embed.{name}.beta"])
    return h


def positional_embed(
    tape: dm.Tape,
    P: Mapping[str, dm.Tensor],
    cart: np.ndarray,
    cyl: np.ndarray,
    vcfg: VoxelConfig,
    cfg: EmbedConfig,
) -> Optional[dm.Tensor]:
    """V x D embedding: f_C(xyz) for cartesian, f_P(rho, theta, z) for polar, their sum for mixed."""
    if cfg.mode == "none":
        return None
    c_in, p_in = scale_coordinates(cart, cyl, vcfg, cfg)
    parts = []
    if cfg.uses_cartesian:
        parts.append(_branch(tape, P, "cart", c_in, cfg.normalize))
    if cfg.uses_polar:
        parts.append(_branch(tape, P, "polar", p_in, cfg.normalize))
    return parts[0] if len(parts) == 1 else dm.add(parts[0], parts[1])


def embed_scene(tape, P, scene: VoxelScene, cfg: EmbedConfig) -> Optional[dm.Tensor]:
    cart, cyl = positional_coordinates(scene)
    return positional_embed(tape, P, cart, cyl, scene.config, cfg)


def fuse_features(F: dm.Tensor, mpe: Optional[dm.Tensor]) -> dm.Tensor:
    """F_P = F + MPE."""
    if mpe is None:
        return F
    if F.shape != mpe.shape:
        raise dm.ShapeError(f"fuse_features: features {F.shape} vs embedding {mpe.shape}")
    return dm.add(F, mpe)
