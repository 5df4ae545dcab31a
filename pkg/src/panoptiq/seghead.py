"""Query-based segmentation head with position-aware masks and masked focal attention.

Masks are stored query-major (N x V).  Every decoder layer reads the combined
mask of the previous prediction both as a hard attention mask (positions with
a non-positive logit are blocked) and, with masked focal attention on, as the
attention logits themselves.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional

import numpy as np

from . import diffmath as dm
from .embedding import EmbedConfig, embed_scene, fuse_features, init_embed_params
from .voxelizer import RAW_FEATURE_DIM, VoxelScene


@dataclass(frozen=True)
class HeadConfig:
    queries: int = 32
    layers: int = 3
    dim: int = 64
    heads: int = 1
    num_classes: int = 3
    pa_seg: bool = True
    mfa: bool = True
    ffn_mult: int = 4
    query_std: float = 0.02
    embed: EmbedConfig = field(default_factory=EmbedConfig)

    def __post_init__(self):
        if self.queries < 1 or self.layers < 0 or self.dim < 1:
            raise ValueError("queries and dim must be positive, layers non-negative")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by {self.heads} heads")

    @property
    def uses_pa_seg(self) -> bool:
        return self.pa_seg and self.embed.mode != "none"


@dataclass
class HeadOutput:
    C: dm.Tensor  # N x (K+1) class logits
    M_F: dm.Tensor  # N x V
    M_P: Optional[dm.Tensor]  # N x V, None without position-aware masks
    M: dm.Tensor  # N x V
    Q: dm.Tensor  # N x D
    attn: Optional[np.ndarray] = None  # cross-attention weights that produced Q (layers >= 1)


def _dense(rng, fan_in, fan_out):
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, fan_out))


def init_params(cfg: HeadConfig, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    D, K1 = cfg.dim, cfg.num_classes + 1
    p: Dict[str, np.ndarray] = {
        "enc.w1": _dense(rng, RAW_FEATURE_DIM, D),
        "enc.b1": np.zeros(D),
        "enc.w2": _dense(rng, D, D),
        "enc.b2": np.zeros(D),
        "enc.gamma": np.ones(D),
        "enc.beta": np.zeros(D),
    }
    p.update(init_embed_params(D, cfg.embed, rng))
    p["query"] = rng.normal(0.0, cfg.query_std, (cfg.queries, D))
    p["head.cls.w"] = _dense(rng, D, K1)
    p["head.cls.b"] = np.full(K1, -2.0)
    for name in ("mf", "mp"):
        # small so that initial mask logits stay well inside the sigmoid's linear range
        p[f"head.{name}.w"] = _dense(rng, D, D) / math.sqrt(D)
        p[f"head.{name}.b"] = np.zeros(D)
    for l in range(1, cfg.layers + 1):
        pre = f"layer{l}."
        for name in ("v", "q", "k", "sa.q", "sa.k", "sa.v", "sa.o"):
            p[pre + name + ".w"] = _dense(rng, D, D)
            p[pre + name + ".b"] = np.zeros(D)
        p[pre + "ffn.w1"] = _dense(rng, D, cfg.ffn_mult * D)
        p[pre + "ffn.b1"] = np.zeros(cfg.ffn_mult * D)
        p[pre + "ffn.w2"] = _dense(rng, cfg.ffn_mult * D, D)
        p[pre + "ffn.b2"] = np.zeros(D)
        for k in (1, 2, 3):
            p[pre + f"norm{k}.gamma"] = np.ones(D)
            p[pre + f"norm{k}.beta"] = np.zeros(D)
    return p


def bind_params(tape: dm.Tape, params: Mapping[str, np.ndarray]) -> Dict[str, dm.Tensor]:
    return {k: tape.param(k, v) for k, v in params.items()}


def encode_voxels(tape: dm.Tape, P: Mapping[str, dm.Tensor], raw: np.ndarray) -> dm.Tensor:
    """Per-voxel MLP (relu) then layer norm; stands in for a sparse-convolution backbone."""
    x = tape.const(raw)
    h = dm.relu(dm.linear(x, P["enc.w1"], P["enc.b1"]))
    h = dm.linear(h, P["enc.w2"], P["enc.b2"])
    return dm.layernorm(h, P["enc.gamma"], P["enc.beta"])


def predict_heads(Q: dm.Tensor, F_P: dm.Tensor, mpe: Optional[dm.Tensor], P, use_pa_seg: bool = True):
    """C = f_C(Q), M_F = f_MF(Q) F_P^T, M_P = f_MP(Q) MPE^T, M = M_F + M_P."""
    C = dm.linear(Q, P["head.cls.w"], P["head.cls.b"])
    M_F = dm.matmul(dm.linear(Q, P["head.mf.w"], P["head.mf.b"]), dm.transpose(F_P))
    if use_pa_seg and mpe is not None:
        M_P = dm.matmul(dm.linear(Q, P["head.mp.w"], P["head.mp.b"]), dm.transpose(mpe))
        M = dm.add(M_F, M_P)
    else:
        M_P = None
        M = M_F
    return C, M_F, M_P, M


def attention_mask(M_prev: np.ndarray) -> np.ndarray:
    """0 where the previous mask logit is positive, the large negative sentinel elsewhere.

    Rows with no positive logit are left unmasked (all zeros) so their softmax stays defined.
    """
    A = np.where(M_prev > 0, 0.0, dm.NEG_SENTINEL)
    A[~(M_prev > 0).any(axis=1)] = 0.0
    return A


def _split_heads(x: dm.Tensor, heads: int) -> List[dm.Tensor]:
    if heads == 1:
        return [x]
    d = x.shape[1] // heads
    return [dm.select(x, np.arange(h * d, (h + 1) * d), axis=1) for h in range(heads)]


def _merge_heads(parts: List[dm.Tensor]) -> dm.Tensor:
    return parts[0] if len(parts) == 1 else dm.concat(parts, axis=1)


def masked_focal_attention(Q_prev, M_prev, F_P, P, layer: int, mfa: bool = True, heads: int = 1):
    """Cross-attention from queries to voxels; returns (Q_interacted, attention weights).

    With ``mfa`` the logits are A + M_prev (the previous combined mask); without it
    the dot-product form A + q k^T / sqrt(d) is used.
    """
    pre = f"layer{layer}."
    tape = Q_prev.tape
    A = tape.const(attention_mask(M_prev.value))
    v = dm.linear(F_P, P[pre + "v.w"], P[pre + "v.b"])
    if mfa:
        w = dm.rowsoftmax(dm.add(M_prev, A))
        out = dm.matmul(w, v)
        weights = [w.value]
    else:
        q = dm.linear(Q_prev, P[pre + "q.w"], P[pre + "q.b"])
        k = dm.linear(F_P, P[pre + "k.w"], P[pre + "k.b"])
        outs, weights = [], []
        for qh, kh, vh in zip(_split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)):
            logits = dm.scale(dm.matmul(qh, dm.transpose(kh)), 1.0 / math.sqrt(qh.shape[1]))
            w = dm.rowsoftmax(dm.add(logits, A))
            outs.append(dm.matmul(w, vh))
            weights.append(w.value)
        out = _merge_heads(outs)
    return dm.add(out, Q_prev), (weights[0] if len(weights) == 1 else np.stack(weights))


def self_attention(X: dm.Tensor, P, layer: int, heads: int = 1) -> dm.Tensor:
    pre = f"layer{layer}.sa."
    q = dm.linear(X, P[pre + "q.w"], P[pre + "q.b"])
    k = dm.linear(X, P[pre + "k.w"], P[pre + "k.b"])
    v = dm.linear(X, P[pre + "v.w"], P[pre + "v.b"])
    outs = []
    for qh, kh, vh in zip(_split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)):
        logits = dm.scale(dm.matmul(qh, dm.transpose(kh)), 1.0 / math.sqrt(qh.shape[1]))
        outs.append(dm.matmul(dm.rowsoftmax(logits), vh))
    return dm.linear(_merge_heads(outs), P[pre + "o.w"], P[pre + "o.b"])


def feed_forward(X: dm.Tensor, P, layer: int) -> dm.Tensor:
    pre = f"layer{layer}.ffn."
    return dm.linear(dm.relu(dm.linear(X, P[pre + "w1"], P[pre + "b1"])), P[pre + "w2"], P[pre + "b2"])


def _norm(x, P, layer, k):
    pre = f"layer{layer}.norm{k}."
    return dm.layernorm(x, P[pre + "gamma"], P[pre + "beta"])


def decoder_layer(Q_prev, M_prev, F_P, P, layer: int, cfg: HeadConfig):
    """Cross-attention, self-attention, FFN, each followed by residual add and norm."""
    interacted, weights = masked_focal_attention(Q_prev, M_prev, F_P, P, layer, mfa=cfg.mfa, heads=cfg.heads)
    a = _norm(interacted, P, layer, 1)
    b = _norm(dm.add(a, self_attention(a, P, layer, cfg.heads)), P, layer, 2)
    c = _norm(dm.add(b, feed_forward(b, P, layer)), P, layer, 3)
    return c, weights


def forward_pass(tape: dm.Tape, P: Mapping[str, dm.Tensor], scene: VoxelScene, cfg: HeadConfig):
    """Outputs for the initial queries and after each of the ``cfg.layers`` refinements."""
    if scene.num_voxels < 1:
        raise ValueError("forward_pass needs at least one occupied voxel")
    F = encode_voxels(tape, P, scene.features)
    mpe = embed_scene(tape, P, scene, cfg.embed)
    F_P = fuse_features(F, mpe)
    Q = P["query"]
    use_ps = cfg.uses_pa_seg
    outputs = [HeadOutput(*predict_heads(Q, F_P, mpe, P, use_ps), Q=Q)]
    for l in range(1, cfg.layers + 1):
        Q, weights = decoder_layer(Q, outputs[-1].M, F_P, P, l, cfg)
        outputs.append(HeadOutput(*predict_heads(Q, F_P, mpe, P, use_ps), Q=Q, attn=weights))
    return outputs
