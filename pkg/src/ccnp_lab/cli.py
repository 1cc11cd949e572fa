"""``ccnp-lab`` command line.

Exit codes: 0 success, 1 run failure, 2 config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint
from .datagen import MetaDataset, make_meta_dataset
from .datastore import save_dataset
from .evaluation import CoeffProbeConfig, coefficient_inference, evaluate
from .experiment import (
    ConfigError,
    ExperimentConfig,
    get_dataset,
    load_config,
    projection_dim_sweep,
    run_experiment,
    validate,
)
from .gradcheck import run_gradcheck

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _config(args, **overrides) -> ExperimentConfig:
    path = args.config_pos or args.config
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if path is None:
        return validate(overrides, "command line")
    return load_config(path, **overrides)


def _dataset_for(args, cfg: ExperimentConfig) -> MetaDataset:
    return get_dataset(cfg, args.data)


def cmd_run(args) -> int:
    cfg = _config(args, seeds=[args.seed] if args.seed is not None else None)
    outcome = run_experiment(cfg, args.out or "results", args.jobs, args.data)
    for v, r in outcome.reports.items():
        d = r.display()
        print(f"{v:16s} n={r.n_seeds}  ll={d['ll_mean']:.4f}  mse={d['mse_mean']:.4f}  "
              f"(scales ll x{r.ll_scale:g}, mse x{r.mse_scale:g})")
    for res in outcome.results:
        if not res.ok:
            print(f"FAILED {res.variant}-seed{res.seed}: {res.error}", file=sys.stderr)
    print(f"wrote {outcome.out_dir / 'table.csv'}")
    return outcome.exit_code


def cmd_datagen(args) -> int:
    overrides = {"family": args.family, "count": args.count, "data_seed": args.seed, "n_points": args.n_points}
    cfg = _config(args, **overrides)
    ds = make_meta_dataset(cfg.data_spec(), cfg.count, cfg.split_ratio, cfg.data_seed, cfg.n_points)
    name = args.name or f"{cfg.family}-{cfg.count}-s{cfg.data_seed}"
    path = save_dataset(ds, args.out or "data", name)
    print(f"wrote {path} ({len(ds.train)}/{len(ds.val)}/{len(ds.test)} train/val/test)")
    return EXIT_OK


def _load_model(path):
    try:
        return load_checkpoint(path)
    except (OSError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return None


def cmd_eval(args) -> int:
    cfg = _config(args)
    model = _load_model(args.checkpoint)
    if model is None:
        return EXIT_FAIL
    ds = _dataset_for(args, cfg)
    shots = args.shots or cfg.shots
    try:
        report = evaluate([model], ds.test, shots, args.seed if args.seed is not None else cfg.eval_seed)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    out = {"checkpoint": str(args.checkpoint), "shots": shots, **report.to_dict(), "display": report.display()}
    _emit(out, args.out, "eval.json")
    return EXIT_OK


def cmd_probe(args) -> int:
    cfg = _config(args)
    model = _load_model(args.checkpoint)
    if model is None:
        return EXIT_FAIL
    ds = _dataset_for(args, cfg)
    probe_cfg = CoeffProbeConfig(seed=args.seed or 0)
    result = coefficient_inference(model, ds, probe_cfg)
    _emit({"checkpoint": str(args.checkpoint), **result.to_dict()}, args.out, "probe.json")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args, seeds=[args.seed] if args.seed is not None else None)
    dims = [int(d) for d in args.dims.split(",")] if args.dims else None
    rows, trend, path = projection_dim_sweep(cfg, dims, args.out or "results", args.jobs, args.data)
    for r in rows:
        print(f"z={r.dim:4d}  mse={r.mse_mean:.6g}")
    print(f"trend: {trend}  (reported only)")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(seed=args.seed or 0)
    width = max(len(k) for k in results)
    for op, r in results.items():
        print(f"{op:{width}s}  max_rel={r.max_rel:.3e}  max_abs={r.max_abs:.3e}  {'ok' if r.passed else 'FAIL'}")
    return EXIT_OK if all(r.passed for r in results.values()) else EXIT_FAIL


def _emit(obj: dict, out: str | None, filename: str) -> None:
    text = json.dumps(obj, indent=2)
    print(text)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / filename).write_text(text)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (TOML or JSON)")
    common.add_argument("--seed", type=int, help="seed override")
    common.add_argument("--out", help="output directory (run/sweep-proj: results, datagen: data)")
    common.add_argument("--jobs", type=int, default=1, help="parallel training jobs")
    common.add_argument("--data", help="dataset cache root (default: $CCNP_LAB_DATA or ./data)")

    p = argparse.ArgumentParser(prog="ccnp-lab", description="Contrastive conditional neural process experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("run", parents=[common], help="train and evaluate every variant x seed")
    s.add_argument("config_pos", nargs="?", metavar="CONFIG")
    s.set_defaults(fn=cmd_run)

    s = sub.add_parser("datagen", parents=[common], help="generate and cache a meta-dataset")
    s.add_argument("config_pos", nargs="?", metavar="CONFIG")
    s.add_argument("--family")
    s.add_argument("--count", type=int)
    s.add_argument("--n-points", type=int)
    s.add_argument("--name", help="cache file stem")
    s.set_defaults(fn=cmd_datagen)

    s = sub.add_parser("eval", parents=[common], help="N-shot metrics of a checkpoint on the test split")
    s.add_argument("checkpoint")
    s.add_argument("config_pos", nargs="?", metavar="CONFIG")
    s.add_argument("--shots", type=int)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("probe", parents=[common], help="coefficient-inference probe on a frozen checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("config_pos", nargs="?", metavar="CONFIG")
    s.set_defaults(fn=cmd_probe)

    s = sub.add_parser("sweep-proj", parents=[common], help="projection-head dimension sweep")
    s.add_argument("config_pos", nargs="?", metavar="CONFIG")
    s.add_argument("--dims", help="comma-separated projection dims")
    s.set_defaults(fn=cmd_sweep)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every tensor op")
    s.set_defaults(fn=cmd_gradcheck, config_pos=None)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
