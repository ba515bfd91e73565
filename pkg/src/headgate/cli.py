"""Command-line experiment runner.

Every command takes a JSON config (all fields optional, defaults match the
published recipe), dotted-path overrides, a seed list, and an output
directory; artifacts land under <out>/<run-id>/ where the run id hashes the
resolved config, so identical invocations are deduplicated and reruns are
byte-identical.

Commands: train, lodo, ablate {components,mmd-routing,strategy},
sweep alpha, headdrop, dump gates, export, verify.
Exit codes: 0 success, 1 config/validation error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from .data import lodo_split
from .encoder import load_model, save_model
from .errors import ConfigError, NumericError, ShapeError
from .experiments import (COMPONENT_GRID, ExperimentConfig, build_world,
                          component_variant, run_single, variant)
from .importance import (HeadRankConfig, averaged_drop_curve, drop_curve,
                         prefix_keeps_every_layer, rank_adapt_and_drop,
                         rank_cv_bernoulli, rank_mmd, safe_random_orderings,
                         write_curves_csv)
from .io import dumps_json
from .trainer import ROUTED_GROUPS, STRATEGIES

DEFAULT_ALPHAS = (0.0, 0.1, 0.2, 0.3, 0.5)
OUT_ENV = "HEADGATE_OUT"


def _float_cell(x) -> str:
    return repr(float(x))


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    if args.set:
        cfg.apply_overrides(args.set)
    if args.seeds:
        cfg.seeds = tuple(int(s) for s in args.seeds.split(","))
    if args.out:
        cfg.out_dir = args.out
    elif os.environ.get(OUT_ENV) and not args.config:
        cfg.out_dir = os.environ[OUT_ENV]
    cfg.validate()
    return cfg


def run_dir_for(cfg: ExperimentConfig, seed: int, tag: str) -> Path:
    path = Path(cfg.out_dir) / cfg.run_id(seed, extra=tag)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_json(path, payload) -> None:
    Path(path).write_text(dumps_json(payload) + "\n")


def write_history(path, history) -> None:
    with open(path, "w") as fh:
        for record in history:
            fh.write(dumps_json(record) + "\n")


def _single_run_artifacts(cfg: ExperimentConfig, seed: int, target: int, tag: str) -> dict:
    out = run_single(cfg, seed, target)
    run_dir = run_dir_for(cfg, seed, f"{tag}-t{target}")
    write_json(run_dir / "config.json",
               {"config": cfg.to_dict(), "seed": seed, "target_domain": target})
    write_history(run_dir / "metrics.jsonl", out["history"])
    write_json(run_dir / "summary.json", {"config": cfg.to_dict(), **out["summary"]})
    save_model(out["model"], run_dir / "model.ckpt")
    out["run_dir"] = run_dir
    return out


def cmd_train(args) -> int:
    cfg = load_config(args)
    for seed in cfg.seeds:
        out = _single_run_artifacts(cfg, seed, cfg.target_domain, "train")
        print(f"seed {seed} target {cfg.target_domain}: "
              f"accuracy {out['summary']['accuracy']:.4f} -> {out['run_dir']}")
    return 0


def cmd_lodo(args) -> int:
    cfg = load_config(args)
    rows = []
    for seed in cfg.seeds:
        per_target = {}
        for target in range(cfg.data.num_domains):
            out = _single_run_artifacts(cfg, seed, target, "lodo")
            per_target[target] = out["summary"]["accuracy"]
        mean = float(np.mean(list(per_target.values())))
        rows.append({"seed": seed, "per_target": per_target, "mean_accuracy": mean})
        print(f"seed {seed}: per-target "
              + " ".join(f"{t}:{a:.4f}" for t, a in per_target.items())
              + f" mean {mean:.4f}")
    agg = Path(cfg.out_dir) / f"lodo-{cfg.run_id(0, 'lodo-agg')}.csv"
    with open(agg, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed"] + [f"target_{t}" for t in range(cfg.data.num_domains)] + ["mean"])
        for row in rows:
            writer.writerow([row["seed"]]
                            + [_float_cell(row["per_target"][t]) for t in range(cfg.data.num_domains)]
                            + [_float_cell(row["mean_accuracy"])])
    print(f"wrote {agg}")
    return 0


def _grid_csv(cfg: ExperimentConfig, tag: str, variants: dict) -> Path:
    """Run every (variant, seed, target) cell and write one tidy CSV."""
    rows = []
    for name, vcfg in variants.items():
        for seed in cfg.seeds:
            for target in range(cfg.data.num_domains):
                out = run_single(vcfg, seed, target)
                rows.append((name, seed, target, out["summary"]["accuracy"]))
                print(f"{tag} {name} seed {seed} target {target}: "
                      f"{out['summary']['accuracy']:.4f}")
    path = Path(cfg.out_dir) / f"{tag}-{cfg.run_id(0, tag)}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "seed", "target", "accuracy"])
        for name, seed, target, acc in rows:
            writer.writerow([name, seed, target, _float_cell(acc)])
        writer.writerow([])
        writer.writerow(["variant", "mean_accuracy", "std_over_seeds"])
        for name in variants:
            per_seed = [np.mean([r[3] for r in rows if r[0] == name and r[1] == s])
                        for s in cfg.seeds]
            writer.writerow([name, _float_cell(np.mean(per_seed)), _float_cell(np.std(per_seed))])
    print(f"wrote {path}")
    return path


def cmd_ablate(args) -> int:
    cfg = load_config(args)
    if args.grid == "components":
        variants = {name: component_variant(cfg, name) for name in COMPONENT_GRID}
    elif args.grid == "mmd-routing":
        variants = {name: variant(cfg, True, True, mmd_updates=name) for name in ROUTED_GROUPS}
    elif args.grid == "strategy":
        variants = {name: variant(cfg, True, True, strategy=name) for name in STRATEGIES}
    else:
        raise ConfigError(f"unknown ablation grid {args.grid!r}")
    _grid_csv(cfg, f"ablate-{args.grid}", variants)
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args)
    if args.quantity != "alpha":
        raise ConfigError(f"unknown sweep quantity {args.quantity!r}")
    values = [float(v) for v in args.values.split(",")] if args.values else list(DEFAULT_ALPHAS)
    variants = {f"alpha={v:g}": variant(cfg, True, True, mmd_weight=v) for v in values}
    _grid_csv(cfg, "sweep-alpha", variants)
    return 0


def cmd_headdrop(args) -> int:
    cfg = load_config(args)
    counts = tuple(int(c) for c in args.counts.split(",")) if args.counts else (0, 1, 2, 3, 4, 5, 6)
    strategies = args.strategies.split(",") if args.strategies else \
        ["random", "mmd_rank", "cv_bernoulli", "adapt_and_drop"]
    rank_cfg = HeadRankConfig(steps=args.rank_steps)
    rows = []
    for seed in cfg.seeds:
        dataset, model, sub = build_world(cfg, seed)
        train_ds, test_ds = lodo_split(dataset, cfg.target_domain)
        rank_cfg.seed = sub["train"]
        for strategy in strategies:
            if strategy == "random":
                rng = np.random.default_rng(sub["train"])
                orderings = safe_random_orderings(model, rng, repeats=3, max_count=max(counts))
                curve = averaged_drop_curve(model, orderings, counts,
                                            test_ds.tokens, test_ds.labels)
            else:
                if strategy == "mmd_rank":
                    ordering = rank_mmd(model, train_ds)
                elif strategy == "cv_bernoulli":
                    ordering = rank_cv_bernoulli(model, train_ds, rank_cfg)
                elif strategy == "adapt_and_drop":
                    ordering = rank_adapt_and_drop(model, train_ds, rank_cfg)
                else:
                    raise ConfigError(f"unknown strategy {strategy!r}")
                if not prefix_keeps_every_layer(ordering, max(counts),
                                                cfg.encoder.num_layers, cfg.encoder.num_heads):
                    print(f"note: {strategy} seed {seed} would empty a layer; "
                          f"curve truncated where invalid")
                curve = []
                for k in counts:
                    try:
                        curve.extend(drop_curve(model, ordering, (k,),
                                                test_ds.tokens, test_ds.labels))
                    except ConfigError:
                        break
            for k, acc in curve:
                rows.append((strategy, seed, k, acc))
            print(f"seed {seed} {strategy}: "
                  + " ".join(f"{k}:{a:.3f}" for k, a in curve))
    path = Path(cfg.out_dir) / f"headdrop-{cfg.run_id(0, 'headdrop')}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    write_curves_csv(path, rows)
    print(f"wrote {path}")
    return 0


def cmd_dump(args) -> int:
    if args.what != "gates":
        raise ConfigError(f"unknown dump target {args.what!r}")
    model = load_model(args.checkpoint)
    if model.gates is None:
        raise ConfigError("checkpoint has no gate parameters")
    out = Path(args.out or "gate_report.csv")
    model.gates.write_report_csv(out)
    print(f"wrote {out}")
    return 0


def cmd_export(args) -> int:
    summaries = []
    for run_dir in args.run_dirs:
        path = Path(run_dir) / "summary.json"
        if not path.exists():
            raise ConfigError(f"{run_dir}: no summary.json")
        summaries.append(json.loads(path.read_text()))
    configs = {dumps_json({k: v for k, v in s["config"].items() if k != "seeds"})
               for s in summaries}
    if len(configs) > 1 and not args.force:
        raise ConfigError("run dirs hold heterogeneous configs (use --force to aggregate anyway)")
    out = Path(args.out or "export.csv")
    by_target: dict = {}
    for s in summaries:
        by_target.setdefault(s["target_domain"], []).append(s["accuracy"])
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "target_domain", "accuracy"])
        for s in sorted(summaries, key=lambda r: (r["seed"], r["target_domain"])):
            writer.writerow([s["seed"], s["target_domain"], _float_cell(s["accuracy"])])
        writer.writerow([])
        writer.writerow(["target_domain", "mean_accuracy", "std_accuracy", "runs"])
        for target in sorted(by_target):
            accs = by_target[target]
            writer.writerow([target, _float_cell(np.mean(accs)),
                             _float_cell(np.std(accs)), len(accs)])
        all_accs = [s["accuracy"] for s in summaries]
        writer.writerow(["all", _float_cell(np.mean(all_accs)),
                         _float_cell(np.std(all_accs)), len(all_accs)])
    print(f"wrote {out}")
    return 0


def cmd_verify(args) -> int:
    import pytest

    for candidate in (Path.cwd() / "tests", Path(__file__).resolve().parents[2] / "tests"):
        if candidate.is_dir():
            extra = ["-k", args.only] if args.only else []
            return pytest.main(["-q", str(candidate)] + extra)
    print("verify: cannot locate the tests directory (run from a source checkout)",
          file=sys.stderr)
    return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="headgate",
                                     description="experiment runner for gated head adaptation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--set", action="append", default=[],
                       metavar="PATH=VALUE", help="dotted-path override")
        p.add_argument("--seeds", help="comma-separated seed list")
        p.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./runs)")

    common(sub.add_parser("train", help="single leave-one-domain-out training run per seed"))
    common(sub.add_parser("lodo", help="train against every held-out domain"))

    p = sub.add_parser("ablate", help="component / routing / strategy grids")
    p.add_argument("grid", choices=["components", "mmd-routing", "strategy"])
    common(p)

    p = sub.add_parser("sweep", help="hyperparameter sweeps")
    p.add_argument("quantity", choices=["alpha"])
    p.add_argument("--values", help="comma-separated alpha values")
    common(p)

    p = sub.add_parser("headdrop", help="head-importance drop curves")
    p.add_argument("--counts", help="comma-separated drop counts")
    p.add_argument("--strategies", help="comma-separated strategy names")
    p.add_argument("--rank-steps", type=int, default=200)
    common(p)

    p = sub.add_parser("dump", help="export learned values from a checkpoint")
    p.add_argument("what", choices=["gates"])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")

    p = sub.add_parser("export", help="aggregate run summaries into a CSV")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("verify", help="run the full invariant and oracle test suite")
    p.add_argument("--only", help="pytest -k expression")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "train": cmd_train, "lodo": cmd_lodo, "ablate": cmd_ablate,
        "sweep": cmd_sweep, "headdrop": cmd_headdrop, "dump": cmd_dump,
        "export": cmd_export, "verify": cmd_verify,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, ShapeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
