"""Command-line entry point: ``tailspace <verb> [--config FILE] [--out DIR] [--seed N]``.

Verbs run one pipeline stage for a single seed (``calibrate``, ``init``,
``train``, ``analyze``) or the whole grid (``experiment``, ``compare``).
Exit codes: 0 success, 1 invalid config or arguments, 2 some grid cells failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .adapter import InitStrategy, save_adapter
from .analysis import spectral_report
from .calibration import calibrate_model, dump_covariances
from .experiment import (
    ConfigError,
    ExperimentConfig,
    cell_name,
    compare,
    inject_adapters,
    load_config,
    load_manifest,
    prepare,
    run_cell,
    run_experiment,
)
from .model import load_model, save_model

log = logging.getLogger("tailspace.cli")

EXIT_OK, EXIT_INVALID, EXIT_PARTIAL = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config (defaults used when omitted)")
    common.add_argument("--out", type=Path, help="output directory (overrides the config)")
    common.add_argument("--seed", type=int, help="seed for single-run verbs (default: first config seed)")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    p = argparse.ArgumentParser(prog="tailspace", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="verb", required=True)

    sub.add_parser("calibrate", parents=[common], help="write per-layer output covariances")
    for verb, text in (("init", "write initialized adapters for one strategy and rank"),
                       ("train", "run one grid cell: calibrate, init, train, analyze")):
        sp = sub.add_parser(verb, parents=[common], help=text)
        sp.add_argument("--strategy", help="strategy tag (default: first in config)")
        sp.add_argument("--rank", type=int, help="adapter rank (default: first in config)")
    sp = sub.add_parser("analyze", parents=[common], help="effective-rank report of a model")
    sp.add_argument("--model", type=Path, help="model checkpoint (default: the config's pretrained model)")
    sp = sub.add_parser("experiment", parents=[common], help="run the full strategy x rank x seed grid")
    sp.add_argument("--workers", type=int, help="parallel grid cells")
    sp = sub.add_parser("compare", parents=[common], help="tabulate a finished experiment")
    sp.add_argument("--manifest", type=Path, help="manifest.json or its directory (default: --out)")
    return p


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.out is not None:
        cfg.out = str(args.out)
    return cfg


def _seed(args, cfg: ExperimentConfig) -> int:
    return cfg.seeds[0] if args.seed is None else args.seed


def _choice(args, cfg: ExperimentConfig) -> tuple[str, int]:
    strategy = args.strategy or cfg.strategies[0]
    rank = args.rank or cfg.ranks[0]
    problems = []
    try:
        InitStrategy.parse(strategy)
    except ValueError as exc:
        problems.append(str(exc))
    if rank < 1:
        problems.append(f"rank must be >= 1, got {rank}")
    if problems:
        raise ConfigError(problems)
    return strategy, rank


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    seed = _seed(args, cfg)
    task, cal = prepare(cfg, seed)
    covs = calibrate_model(task.student, cal, cfg.task.targets, cfg.calibration.centering)
    paths = dump_covariances(covs, Path(cfg.out) / "covariances")
    for path in paths:
        print(path)
    return EXIT_OK


def cmd_init(args) -> int:
    cfg = _config(args)
    seed = _seed(args, cfg)
    strategy, rank = _choice(args, cfg)
    task, cal = prepare(cfg, seed)
    layers = inject_adapters(task, cal, strategy, rank, cfg.alpha_for(rank), seed, cfg.calibration.centering,
                             cfg.task.targets)
    out = Path(cfg.out) / "adapters" / cell_name(strategy, rank, seed)
    out.mkdir(parents=True, exist_ok=True)
    for name, layer in layers.items():
        save_adapter(out / f"{name}.adapter", name, layer)
        print(out / f"{name}.adapter")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    seed = _seed(args, cfg)
    strategy, rank = _choice(args, cfg)
    run_dir = Path(cfg.out) / cell_name(strategy, rank, seed)
    rec = run_cell(cfg, strategy, rank, seed, run_dir)
    if rec["status"] != "ok":
        print(f"run failed: {rec['error']}", file=sys.stderr)
        return EXIT_PARTIAL
    with open(run_dir / "summary.json") as fh:
        print(json.dumps(json.load(fh), sort_keys=True))
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _config(args)
    seed = _seed(args, cfg)
    task, cal = prepare(cfg, seed)
    model = load_model(args.model) if args.model else task.student
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    report = spectral_report(model, cal, cfg.task.targets, cfg.calibration.centering)
    report.write_csv(out / "report.csv")
    report.write_spectra(out / "spectra")
    if not args.model:
        save_model(out / "model.ckpt", model)
    for rec in report.records:
        print(f"{rec.layer}\t{rec.effective_rank:.4f}")
    print(f"total\t{report.total:.4f}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = _config(args)
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError([f"workers must be >= 1, got {args.workers}"])
        cfg.workers = args.workers
    manifest = run_experiment(cfg)
    out = Path(cfg.out)
    compare(manifest, out, out / "comparison.csv")
    print(f"{len(manifest['runs'])} runs, {manifest['failed']} failed; manifest at {out / 'manifest.json'}")
    return EXIT_PARTIAL if manifest["failed"] else EXIT_OK


def cmd_compare(args) -> int:
    cfg = _config(args)
    where = args.manifest or Path(cfg.out)
    manifest = load_manifest(where)
    root = where if where.is_dir() else where.parent
    rows = compare(manifest, root, root / "comparison.csv")
    for row in rows:
        loss = "NA" if row["mean_final_loss"] is None else f"{row['mean_final_loss']:.6g}"
        print(f"{row['strategy']}\tr={row['rank']}\tloss={loss}\tn={row['n_runs']}\tmissing={row['missing']}")
    return EXIT_PARTIAL if any(r["missing"] for r in rows) else EXIT_OK


COMMANDS = {
    "calibrate": cmd_calibrate,
    "init": cmd_init,
    "train": cmd_train,
    "analyze": cmd_analyze,
    "experiment": cmd_experiment,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    console = logging.StreamHandler()
    console.setLevel(args.log_level)
    console.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logging.basicConfig(level=args.log_level, handlers=[console])
    try:
        return COMMANDS[args.verb](args)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
