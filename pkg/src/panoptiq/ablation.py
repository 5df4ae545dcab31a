"""Variant grid over embedding mode, position-aware masks and masked focal attention."""
from __future__ import annotations

import csv
import io
import itertools
import logging
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence

from .config import RunConfig, component_seeds, run_seed
from .pointcloud import PointCloud
from .training import evaluate, generate_dataset, train

log = logging.getLogger("panoptiq")


@dataclass(frozen=True)
class Variant:
    mode: str
    pa_seg: bool
    mfa: bool

    @property
    def name(self) -> str:
        return f"{self.mode}-ps{int(self.pa_seg)}-mfa{int(self.mfa)}"

    def apply(self, cfg: RunConfig, seed: int) -> RunConfig:
        embed = replace(cfg.head.embed, mode=self.mode)
        return replace(cfg, seed=seed, head=replace(cfg.head, embed=embed, pa_seg=self.pa_seg, mfa=self.mfa))

    def attention_form(self) -> str:
        return "M_prev + A (masked focal)" if self.mfa else "q k^T / sqrt(d) + A (dot product)"


def variant_grid(cfg: RunConfig) -> List[Variant]:
    a = cfg.ablate
    grid = [Variant(m, p, f) for m, p, f in itertools.product(a.modes, a.pa_seg, a.mfa)]
    return sorted(grid, key=lambda v: v.name)


def benchmark_data(cfg: RunConfig):
    """Train and held-out clouds shared by every variant and replicate."""
    seeds = component_seeds(cfg.seed)
    train_clouds, _ = generate_dataset(cfg, cfg.data.train_count, seeds["train_data"], "train")
    test_clouds, _ = generate_dataset(cfg, cfg.data.test_count, seeds["test_data"], "test",
                                      layout=cfg.data.test_layout or None)
    return train_clouds, test_clouds


def run_variant(cfg: RunConfig, variant: Variant, replicate: int, train_clouds: Sequence[PointCloud],
                test_clouds: Sequence[PointCloud], structural: Optional[Callable[[str], None]] = None) -> dict:
    vcfg = variant.apply(cfg, run_seed(cfg.seed, replicate))
    line = f"variant {variant.name} replicate {replicate}: cross-attention logits = {variant.attention_form()}"
    log.info(line)
    if structural:
        structural(line)
    result = train(vcfg, train_clouds)
    ev = evaluate(result.params, vcfg, test_clouds)
    agg, diag = ev.report.aggregate, ev.report.diagnostics
    ais = diag["ais_mean"] or {}
    row = {
        "variant": variant.name, "embed_mode": variant.mode, "pa_seg": variant.pa_seg,
        "mfa": variant.mfa, "replicate": replicate, "seed": vcfg.seed,
        "pq": agg["pq"], "pq_th": agg["pq_th"], "pq_st": agg["pq_st"], "sq": agg["sq"], "rq": agg["rq"],
        "rq_th": agg["rq_th"], "oracle_rq_th": diag["oracle_rq_th"], "oracle_gap_th": diag.get("oracle_gap_th"),
        "ais_pairs": diag["ais_pairs"], "ais_x": ais.get("x"), "ais_y": ais.get("y"),
        "ais_rho": ais.get("rho"), "ais_theta": ais.get("theta"),
        "final_loss": result.epochs[-1]["loss"] if result.epochs else None,
    }
    for l, rs in enumerate(diag["relative_scale_layer"]):
        row[f"rs_layer{l}"] = rs
    return row


def run_ablation(cfg: RunConfig, structural: Optional[Callable[[str], None]] = None,
                 data=None) -> List[dict]:
    """One row per (variant, replicate), ordered by variant name then replicate."""
    train_clouds, test_clouds = data if data is not None else benchmark_data(cfg)
    rows = []
    for variant in variant_grid(cfg):
        for r in range(cfg.ablate.seeds):
            rows.append(run_variant(cfg, variant, r, train_clouds, test_clouds, structural))
    return rows


def rows_to_csv(rows: List[dict], layers: int) -> str:
    cols = ["variant", "embed_mode", "pa_seg", "mfa", "replicate", "seed", "pq", "pq_th", "pq_st", "sq", "rq",
            "rq_th", "oracle_rq_th", "oracle_gap_th", "ais_pairs", "ais_x", "ais_y", "ais_rho", "ais_theta",
            "final_loss"] + [f"rs_layer{l}" for l in range(layers + 1)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in rows:
        w.writerow([_cell(row.get(c)) for c in cols])
    return buf.getvalue()


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)
