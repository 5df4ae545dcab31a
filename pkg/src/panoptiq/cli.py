"""Command-line entry point: gen-data, train, eval, ablate, grad-check.

Exit status is 0 on success, 1 for invalid input or configuration and 2 when
a loss or gradient turns non-finite.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, component_seeds
from .pointcloud import CloudFormatError, SceneError
from .training import NumericError

log = logging.getLogger("panoptiq")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit), overrides the config")
    p.add_argument("--out", help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="panoptiq", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write synthetic clouds and a manifest")
    g.add_argument("--count", type=int, help="number of scenes (default data.count)")
    g.add_argument("--split", choices=("train", "test"), default="train", help="which derived data seed to use")
    g.add_argument("--layout", choices=("ring", "crowd", "mixed"), help="override scene.layout")

    t = sub.add_parser("train", parents=[common], help="train a model on a dataset directory")
    t.add_argument("--data", help="dataset directory (default data.train)")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset directory")
    e.add_argument("--checkpoint", help="model.bin written by train (not needed with --oracle)")
    e.add_argument("--data", help="dataset directory (default data.test)")
    e.add_argument("--oracle", action="store_true", help="score the ground truth against itself")
    e.add_argument("--dump-mpe", action="store_true", help="save each scene's positional embedding as .npy")

    sub.add_parser("ablate", parents=[common], help="train and evaluate the configured variant grid")

    c = sub.add_parser("grad-check", parents=[common], help="finite-difference check of loss and model gradients")
    c.add_argument("--points", type=int, default=50, help="random points per check")
    c.add_argument("--tolerance", type=float, default=1e-4)
    return parser


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.set:
        kv = cfg.to_mapping()
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            kv[k.strip()] = v.strip()
        cfg = RunConfig.from_mapping(kv)
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 1 << 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise FileExistsError(f"{out} exists and is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args, cfg: RunConfig) -> int:
    from .training import generate_dataset, write_dataset

    count = args.count if args.count is not None else cfg.data.count
    if count < 0:
        raise ConfigError("--count must be non-negative")
    seed = component_seeds(cfg.seed)[f"{args.split}_data"]
    clouds, seeds = generate_dataset(cfg, count, seed, args.split, layout=args.layout)
    out = write_dataset(args.out or "data", clouds, seeds, cfg, force=args.force)
    print(f"wrote {len(clouds)} scenes to {out}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    from .training import read_dataset, save_checkpoint, train

    data = args.data or cfg.data.train
    if not data:
        raise ConfigError("no dataset given (--data or data.train)")
    clouds = read_dataset(data)
    out = _out_dir(args, "run")
    (out / "config.txt").write_text(cfg.to_text())
    with open(out / "train_log.jsonl", "w") as fh:
        def record(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if rec["kind"] == "epoch":
                terms = " ".join(f"{k}={v:.4f}" for k, v in rec["terms"].items())
                print(f"epoch {rec['epoch']} loss {rec['loss']:.6f} {terms}")

        result = train(cfg, clouds, on_step=record, on_epoch=record)
    save_checkpoint(out / "model.bin", result.params, cfg)
    print(f"checkpoint {out / 'model.bin'} config hash {cfg.model_hash()}")
    return EXIT_OK


def write_report(out: Path, result) -> None:
    from .training import SCENE_COLUMNS
    import csv

    (out / "report.json").write_text(result.report.to_json() + "\n")
    (out / "report.csv").write_text(result.report.to_csv())
    (out / "diagnostics.csv").write_text(result.report.diagnostics_csv())
    with open(out / "scenes.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCENE_COLUMNS)
        for row in result.scenes:
            w.writerow(["" if row[c] is None else (repr(row[c]) if isinstance(row[c], float) else row[c])
                        for c in SCENE_COLUMNS])


def cmd_eval(args, cfg: RunConfig) -> int:
    from .training import evaluate, load_checkpoint, read_dataset

    data = args.data or cfg.data.test
    if not data:
        raise ConfigError("no dataset given (--data or data.test)")
    params = None
    if not args.oracle:
        if not args.checkpoint:
            raise ConfigError("--checkpoint is required unless --oracle is given")
        params, _ = load_checkpoint(args.checkpoint, cfg)
    clouds = read_dataset(data)
    out = _out_dir(args, "eval")
    result = evaluate(params, cfg, clouds, oracle=args.oracle, mpe_dump=(out / "mpe") if args.dump_mpe else None)
    write_report(out, result)
    agg = result.report.aggregate
    print(f"PQ {agg['pq']:.4f} SQ {agg['sq']:.4f} RQ {agg['rq']:.4f} mIoU {agg['miou']:.4f} -> {out}")
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    from .ablation import rows_to_csv, run_ablation

    out = _out_dir(args, "ablate")
    with open(out / "ablate.log", "w") as fh:
        def structural(line):
            fh.write(line + "\n")
            fh.flush()
            print(line)

        rows = run_ablation(cfg, structural)
    (out / "ablation.csv").write_text(rows_to_csv(rows, cfg.head.layers))
    print(f"{len(rows)} rows -> {out / 'ablation.csv'}")
    return EXIT_OK


def cmd_grad_check(args, cfg: RunConfig) -> int:
    from .gradcheck import check_all

    results = check_all(cfg, points=args.points, seed=cfg.seed)
    worst = 0.0
    for name, err in results.items():
        print(f"{name}: max relative error {err:.3e}")
        worst = max(worst, err)
    if not np.isfinite(worst):
        raise NumericError("non-finite gradient check")
    if worst >= args.tolerance:
        print(f"FAILED: {worst:.3e} >= {args.tolerance:g}")
        return EXIT_NUMERIC
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "grad-check": cmd_grad_check}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](args, cfg)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CloudFormatError, SceneError, FileExistsError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
