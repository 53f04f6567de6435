"""Config-driven strategy x rank x seed grids with persisted artifacts.

Each grid cell gets its own directory::

    runs/<strategy>_r<rank>_s<seed>/
        metrics.csv  summary.json  plot_data.json  run.log
        report_pre.csv  report_post.csv  spectra_pre/  spectra_post/
        adapters/<layer>.adapter

``manifest.json`` is written last, via rename, so its presence marks a
finished grid.  Everything :func:`compare` needs is read back from disk.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import __version__
from .adapter import InitStrategy, initialize, save_adapter
from .analysis import EffectiveRankReport, spectral_report
from .calibration import CENTERING, DEFAULT_SAMPLES, calibrate_model
from .tasks import ModelSpec, Task, TaskSpec, build_task
from .train import TrainConfig, config_dict, run_training

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
COMPARISON_HEADER = ["strategy", "rank", "mean_final_loss", "mean_final_grad_norm",
                     "delta_effective_rank", "n_runs", "missing"]


class ConfigError(ValueError):
    """Raised with every problem found in a config, not just the first."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid experiment config:\n  " + "\n  ".join(self.problems))


@dataclass
class CalibrationConfig:
    n_samples: int = DEFAULT_SAMPLES
    source: str = "downstream"
    centering: str = "second_moment"
    batch_size: int = 1


@dataclass
class ExperimentConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    task: TaskSpec = field(default_factory=TaskSpec)
    strategies: list[str] = field(default_factory=lambda: ["vanilla", "astra_tail"])
    ranks: list[int] = field(default_factory=lambda: [8])
    seeds: list[int] = field(default_factory=lambda: [0])
    # "equal_to_rank" or a fixed number
    alpha: str | float = "equal_to_rank"
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    out: str = "runs"
    workers: int = 1

    def alpha_for(self, rank: int) -> float:
        return float(rank) if self.alpha == "equal_to_rank" else float(self.alpha)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = config_dict(self.train)
        return d

    def hash(self) -> str:
        """sha256 over every behaviour-affecting field (output location and worker count excluded)."""
        d = self.to_dict()
        d.pop("out")
        d.pop("workers")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _section(cls, raw, name: str, problems: list[str]):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        problems.append(f"{name} must be an object")
        return None
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        problems.append(f"{name}: unknown keys {unknown}")
    try:
        return cls(**{k: v for k, v in raw.items() if k in known})
    except (TypeError, ValueError) as exc:
        problems.append(f"{name}: {exc}")
        return None


def _train_section(raw, problems: list[str]):
    if raw is None:
        return TrainConfig()
    if not isinstance(raw, dict):
        problems.append("train must be an object")
        return None
    known = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        problems.append(f"train: unknown keys {unknown}")
    # build unvalidated so every training problem is listed, not just the first
    cfg = object.__new__(TrainConfig)
    for f in fields(TrainConfig):
        setattr(cfg, f.name, raw.get(f.name, f.default))
    try:
        bad = cfg.problems()
    except TypeError as exc:
        bad = [str(exc)]
    problems.extend(f"train: {p}" for p in bad)
    return None if bad else cfg


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _check_model(model: ModelSpec, task: TaskSpec | None, ranks: list, problems: list[str]) -> None:
    if model.depth < 1 or min(model.d_in, model.width, model.d_out) < 1:
        problems.append("model: depth and all widths must be >= 1")
        return
    try:
        layers = model.layers()
    except ValueError as exc:
        problems.append(f"model: {exc}")
        return
    names = {s.name: s for s in layers}
    targets = task.targets if task is not None and task.targets else list(names)
    missing = [t for t in targets if t not in names]
    if missing:
        problems.append(f"task.targets: unknown layers {missing}")
    limit = min((min(names[t].d_in, names[t].d_out) for t in targets if t in names), default=0)
    for r in ranks:
        if _is_int(r) and limit and r > limit:
            problems.append(f"ranks: {r} exceeds the smallest target layer dimension {limit}")
    if task is not None and task.kind == "gaussian_classes" and model.d_out != task.n_classes:
        problems.append("gaussian_classes needs model.d_out == task.n_classes")


def parse_config(raw: dict) -> ExperimentConfig:
    """Build and validate an :class:`ExperimentConfig` from JSON-compatible data."""
    problems: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError(["config must be a JSON object"])
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        problems.append(f"unknown top-level keys {unknown}")

    model = _section(ModelSpec, raw.get("model"), "model", problems)
    task = _section(TaskSpec, raw.get("task"), "task", problems)
    calib = _section(CalibrationConfig, raw.get("calibration"), "calibration", problems)
    train = _train_section(raw.get("train"), problems)

    strategies = raw.get("strategies", ["vanilla", "astra_tail"])
    if not isinstance(strategies, list) or not strategies:
        problems.append("strategies must be a non-empty list")
        strategies = []
    for tag in strategies:
        try:
            InitStrategy.parse(tag)
        except (ValueError, AttributeError) as exc:
            problems.append(f"strategies: {exc}")
    if len(set(strategies)) != len(strategies):
        problems.append("strategies contains duplicates")

    ranks = raw.get("ranks", [8])
    if not isinstance(ranks, list) or not ranks:
        problems.append("ranks must be a non-empty list")
        ranks = []
    for r in ranks:
        if not _is_int(r) or r < 1:
            problems.append(f"ranks: {r!r} is not a positive integer")
    if len(set(map(str, ranks))) != len(ranks):
        problems.append("ranks contains duplicates")

    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds:
        problems.append("seeds must be a non-empty explicit list")
        seeds = []
    for s in seeds:
        if not _is_int(s) or s < 0:
            problems.append(f"seeds: {s!r} is not a non-negative integer")
    if len(set(map(str, seeds))) != len(seeds):
        problems.append("seeds contains duplicates")

    alpha = raw.get("alpha", "equal_to_rank")
    if alpha != "equal_to_rank" and not (isinstance(alpha, (int, float)) and not isinstance(alpha, bool)
                                         and math.isfinite(alpha) and alpha > 0):
        problems.append(f"alpha must be 'equal_to_rank' or a positive number, got {alpha!r}")

    if model is not None:
        try:
            _check_model(model, task, ranks, problems)
        except TypeError as exc:
            problems.append(f"model: {exc}")
    if task is not None:
        if task.kind not in ("teacher_student", "gaussian_classes"):
            problems.append(f"task.kind {task.kind!r} is not teacher_student or gaussian_classes")
        if task.gap_directions not in ("random", "weak"):
            problems.append(f"task.gap_directions {task.gap_directions!r} is not random or weak")
        if task.n_train < 1 or task.teacher_rank < 1:
            problems.append("task: n_train and teacher_rank must be >= 1")
    if calib is not None:
        if calib.source not in ("downstream", "general"):
            problems.append(f"calibration.source {calib.source!r} is not downstream or general")
        if calib.centering not in CENTERING:
            problems.append(f"calibration.centering must be one of {CENTERING}")
        if not _is_int(calib.n_samples) or calib.n_samples < 1:
            problems.append("calibration.n_samples must be a positive integer")
        if not _is_int(calib.batch_size) or calib.batch_size < 1:
            problems.append("calibration.batch_size must be a positive integer")
    workers = raw.get("workers", 1)
    if not _is_int(workers) or workers < 1:
        problems.append("workers must be a positive integer")
    out = raw.get("out", "runs")
    if not isinstance(out, str) or not out:
        problems.append("out must be a non-empty path string")

    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(model, task, list(strategies), list(ranks), list(seeds), alpha, calib, train,
                            out, workers)


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: not valid JSON ({exc})"]) from exc
    return parse_config(raw)


def cell_name(strategy: str, rank: int, seed: int) -> str:
    return f"{strategy.replace(':', '-')}_r{rank}_s{seed}"


def prepare(config: ExperimentConfig, seed: int) -> tuple[Task, object]:
    """Fresh task and calibration set for one seed."""
    task = build_task(config.model, config.task, seed)
    cal = task.calibration_set(config.calibration.n_samples, config.calibration.source, seed,
                               config.calibration.batch_size)
    return task, cal


def inject_adapters(task: Task, cal, strategy: str, rank: int, alpha: float, seed: int,
                    centering: str, targets=None) -> dict:
    model = task.student
    parsed = InitStrategy.parse(strategy)
    names = list(targets or model.layer_names)
    covs = calibrate_model(model, cal, names, centering) if parsed.requires_covariance else {}
    layers = {}
    for name in names:
        layer = initialize(parsed, model.base_weight(name), rank, alpha, cov=covs.get(name), seed=seed,
                           bias=model.bias(name))
        model.inject(name, layer)
        layers[name] = layer
    return layers


def run_cell(config: ExperimentConfig, strategy: str, rank: int, seed: int, run_dir: Path) -> dict:
    """Calibrate, initialize, train and analyze one grid cell; returns its manifest record."""
    run_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(run_dir / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    handler.setLevel(logging.INFO)
    root = logging.getLogger("tailspace")
    level = root.level
    # run.log always records INFO; console verbosity is left to the caller's handlers
    root.setLevel(min(root.getEffectiveLevel(), logging.INFO))
    root.addHandler(handler)
    rec = {"strategy": strategy, "rank": rank, "seed": seed, "dir": run_dir.name}
    try:
        task, cal = prepare(config, seed)
        centering = config.calibration.centering
        targets = config.task.targets
        pre = spectral_report(task.student, cal, targets, centering)
        alpha = config.alpha_for(rank)
        log.info("run %s: strategy=%s rank=%d alpha=%g seed=%d", run_dir.name, strategy, rank, alpha, seed)
        layers = inject_adapters(task, cal, strategy, rank, alpha, seed, centering, targets)
        adapter_dir = run_dir / "adapters"
        adapter_dir.mkdir(exist_ok=True)
        for name, layer in layers.items():
            save_adapter(adapter_dir / f"{name}.adapter", name, layer)
        train_cfg = TrainConfig(**{**config_dict(config.train), "seed": seed})
        metrics = run_training(task.student, task.train, train_cfg)
        post = spectral_report(task.student, cal, targets, centering)
        metrics.write_csv(run_dir / "metrics.csv")
        metrics.write_summary(run_dir / "summary.json")
        metrics.write_plot_data(run_dir / "plot_data.json")
        pre.write_csv(run_dir / "report_pre.csv")
        post.write_csv(run_dir / "report_post.csv")
        pre.write_spectra(run_dir / "spectra_pre")
        post.write_spectra(run_dir / "spectra_post")
        log.info("run %s: final loss %r, effective rank %r -> %r", run_dir.name, metrics.final_loss,
                 pre.total, post.total)
        rec.update(status="ok", metrics="metrics.csv", summary="summary.json", plot_data="plot_data.json",
                   report_pre="report_pre.csv", report_post="report_post.csv",
                   adapters=[f"adapters/{n}.adapter" for n in layers])
    except Exception as exc:  # a failed cell must not stop the grid
        log.exception("run %s failed", run_dir.name)
        rec.update(status="failed", error=f"{type(exc).__name__}: {exc}")
    finally:
        root.removeHandler(handler)
        root.setLevel(level)
        handler.close()
    return rec


def _cell_job(args) -> dict:
    config, strategy, rank, seed, run_dir = args
    return run_cell(config, strategy, rank, seed, run_dir)


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def run_experiment(config: ExperimentConfig, out: str | os.PathLike | None = None) -> dict:
    """Run the full strategy x rank x seed grid; returns the manifest written to ``<out>/manifest.json``."""
    out_dir = Path(out if out is not None else config.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    stale = out_dir / MANIFEST
    if stale.exists():
        stale.unlink()
    jobs = [(config, s, r, seed, out_dir / "runs" / cell_name(s, r, seed))
            for s in config.strategies for r in config.ranks for seed in config.seeds]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            records = list(pool.map(_cell_job, jobs))
    else:
        records = [_cell_job(j) for j in jobs]
    for rec in records:
        rec["dir"] = f"runs/{rec['dir']}"
    manifest = {
        "format": "tailspace-manifest",
        "tool_version": __version__,
        "config_hash": config.hash(),
        "config": {k: v for k, v in config.to_dict().items() if k not in ("out", "workers")},
        "runs": records,
        "failed": sum(r["status"] != "ok" for r in records),
    }
    _write_atomic(out_dir / MANIFEST, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_manifest(path: str | os.PathLike) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; the experiment did not finish")
    with open(path) as fh:
        return json.load(fh)


@dataclass
class RunResult:
    strategy: str
    rank: int
    seed: int
    final_loss: float
    final_grad_norm: float
    er_pre: float
    er_post: float

    @property
    def delta_effective_rank(self) -> float:
        return self.er_post - self.er_pre


def read_results(manifest: dict, root: str | os.PathLike) -> tuple[list[RunResult], list[dict]]:
    """Per-run finals re-read from disk; also returns records that failed or lost files."""
    root = Path(root)
    results, missing = [], []
    for rec in manifest["runs"]:
        run_dir = root / rec["dir"]
        if rec.get("status") != "ok":
            missing.append(rec)
            continue
        try:
            with open(run_dir / rec["summary"]) as fh:
                summary = json.load(fh)
            pre = EffectiveRankReport.read_csv(run_dir / rec["report_pre"])
            post = EffectiveRankReport.read_csv(run_dir / rec["report_post"])
        except (OSError, KeyError, ValueError):
            missing.append(rec)
            continue
        results.append(RunResult(rec["strategy"], rec["rank"], rec["seed"], summary["final_loss"],
                                 summary["final_grad_norm"], pre.total, post.total))
    return results, missing


def compare(manifest: dict, root: str | os.PathLike, out_path: str | os.PathLike | None = None) -> list[dict]:
    """Mean finals per (strategy, rank), sorted by mean final loss; empty cells get ``NA``."""
    results, missing = read_results(manifest, root)
    cells: dict[tuple[str, int], list[RunResult]] = {}
    gaps: dict[tuple[str, int], int] = {}
    for rec in manifest["runs"]:
        cells.setdefault((rec["strategy"], rec["rank"]), [])
    for res in results:
        cells[(res.strategy, res.rank)].append(res)
    for rec in missing:
        key = (rec["strategy"], rec["rank"])
        gaps[key] = gaps.get(key, 0) + 1
        log.warning("missing run: %s rank %s seed %s", rec["strategy"], rec["rank"], rec["seed"])
    rows = []
    for (strategy, rank), runs in cells.items():
        n = len(runs)
        row = {"strategy": strategy, "rank": rank, "n_runs": n, "missing": gaps.get((strategy, rank), 0)}
        if n:
            row["mean_final_loss"] = math.fsum(r.final_loss for r in runs) / n
            row["mean_final_grad_norm"] = math.fsum(r.final_grad_norm for r in runs) / n
            row["delta_effective_rank"] = math.fsum(r.delta_effective_rank for r in runs) / n
        else:
            row.update(mean_final_loss=None, mean_final_grad_norm=None, delta_effective_rank=None)
        rows.append(row)
    rows.sort(key=lambda r: (r["mean_final_loss"] is None, r["mean_final_loss"] or 0.0, r["strategy"], r["rank"]))
    if out_path is not None:
        with open(out_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(COMPARISON_HEADER)
            for row in rows:
                w.writerow(["NA" if row[k] is None else (repr(row[k]) if isinstance(row[k], float) else row[k])
                            for k in COMPARISON_HEADER])
    return rows
