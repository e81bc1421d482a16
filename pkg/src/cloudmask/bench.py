"""Multi-seed campaigns: expand a run spec into isolated per-seed runs, execute
them in worker processes, emit scheduler scripts, aggregate a results table."""

from __future__ import annotations

import concurrent.futures as cf
import csv
import json
import logging
import math
import multiprocessing
import os
import re
import statistics
import traceback
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import yaml

from . import datapipe
from .evaluator import THRESHOLD, evaluate
from .trainer import CHECKPOINT_FILE, RunResult, TrainConfig, load_checkpoint, train
from .unet import UNetConfig

log = logging.getLogger(__name__)

RUN_CONFIG_FILE = "config.yaml"
RESULT_FILE = "result.json"
EVAL_FILE = "eval.csv"
MODEL_DIR = "model"
REPORT_CSV = "report.csv"
REPORT_TXT = "report.txt"
THREADS_ENV = "CLOUDMASK_THREADS"
ALLOWED_PLACEHOLDERS = ("seed", "run_dir", "config_path")
# {name} placeholders; shell expansions like ${HOME} are left alone
_PLACEHOLDER = re.compile(r"(?<!\$)\{([A-Za-z_][A-Za-z0-9_]*)\}")

DEFAULT_JOB_TEMPLATE = """#!/bin/bash
#SBATCH --job-name=cloudmask-{seed}
#SBATCH --output={run_dir}/slurm-%j.out
#SBATCH --cpus-per-task=4
#SBATCH --time=02:00:00
export CLOUDMASK_THREADS=${SLURM_CPUS_PER_TASK:-1}
cloudmask train --config {config_path} && cloudmask evaluate --run-dir {run_dir}
"""


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class DataSpec:
    path: Optional[str] = None
    scenes: int = 40
    height: int = 128
    width: int = 128
    seed: int = 0
    test_fraction: float = 0.1

    def load(self) -> list[datapipe.Scene]:
        if self.path is not None:
            return datapipe.read_dataset(self.path)
        return datapipe.generate_dataset(self.scenes, self.height, self.width, self.seed)

    def to_dict(self) -> dict:
        if self.path is not None:
            return {"path": self.path, "test_fraction": self.test_fraction}
        return {
            "generator": {"scenes": self.scenes, "height": self.height, "width": self.width, "seed": self.seed},
            "test_fraction": self.test_fraction,
        }


@dataclass(frozen=True)
class RunConfig:
    """One fully resolved run: a single seed and its own directory."""

    seed: int
    model: UNetConfig
    train: TrainConfig
    data: DataSpec
    stride: int
    threshold: float
    run_dir: Path

    @property
    def config_path(self) -> Path:
        return self.run_dir / RUN_CONFIG_FILE

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "model": {
                "depth": self.model.depth,
                "base_channels": self.model.base_channels,
                "patch": self.model.patch_size,
                "in_channels": self.model.in_channels,
                "kernel_size": self.model.kernel_size,
            },
            "train": {
                "lr": self.train.learning_rate,
                "batch": self.train.batch_size,
                "max_epochs": self.train.max_epochs,
                "patience": self.train.patience,
            },
            "data": self.data.to_dict(),
            "eval": {"stride": self.stride, "threshold": self.threshold},
            "run_dir": str(self.run_dir),
        }


@dataclass
class RunSpec:
    seeds: list[int]
    model: UNetConfig
    train: TrainConfig
    data: DataSpec
    stride: int
    threshold: float
    out_root: Path
    parallelism: int = 1

    def validate(self) -> None:
        if not self.seeds:
            raise SpecError("seeds must list at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise SpecError(f"seeds must be distinct, got {self.seeds}")
        if self.parallelism < 1:
            raise SpecError(f"parallelism must be >= 1, got {self.parallelism}")
        if self.stride <= 0:
            raise SpecError(f"eval stride must be positive, got {self.stride}")

    def run_dir(self, seed: int) -> Path:
        return self.out_root / f"run-{seed}"


def _section(raw: dict, key: str) -> dict:
    value = raw.get(key) or {}
    if not isinstance(value, dict):
        raise SpecError(f"'{key}' must be a mapping")
    return value


def _known(d: dict, allowed: set[str], where: str) -> None:
    extra = set(d) - allowed
    if extra:
        raise SpecError(f"unknown keys in {where}: {sorted(extra)}; allowed: {sorted(allowed)}")


def _parse_common(raw: dict, base: Path) -> tuple[UNetConfig, TrainConfig, DataSpec, int, float]:
    model = _section(raw, "model")
    _known(model, {"depth", "base_channels", "patch", "in_channels", "kernel_size"}, "model")
    model_cfg = UNetConfig(
        in_channels=int(model.get("in_channels", 9)),
        depth=int(model.get("depth", 2)),
        base_channels=int(model.get("base_channels", 8)),
        kernel_size=int(model.get("kernel_size", 3)),
        patch_size=int(model.get("patch", 64)),
    )
    tr = _section(raw, "train")
    _known(tr, {"lr", "batch", "max_epochs", "patience"}, "train")
    train_cfg = TrainConfig(
        learning_rate=float(tr.get("lr", 1e-3)),
        batch_size=int(tr.get("batch", 32)),
        max_epochs=int(tr.get("max_epochs", 200)),
        patience=int(tr.get("patience", 25)),
    )
    data = _section(raw, "data")
    _known(data, {"path", "generator", "test_fraction"}, "data")
    if "path" in data and "generator" in data:
        raise SpecError("data takes either 'path' or 'generator', not both")
    test_fraction = float(data.get("test_fraction", 0.1))
    if "path" in data:
        p = Path(data["path"])
        data_spec = DataSpec(path=str(p if p.is_absolute() else base / p), test_fraction=test_fraction)
    else:
        gen = data.get("generator") or {}
        _known(gen, {"scenes", "height", "width", "seed"}, "data.generator")
        data_spec = DataSpec(
            scenes=int(gen.get("scenes", 40)),
            height=int(gen.get("height", 128)),
            width=int(gen.get("width", 128)),
            seed=int(gen.get("seed", 0)),
            test_fraction=test_fraction,
        )
    ev = _section(raw, "eval")
    _known(ev, {"stride", "threshold"}, "eval")
    stride = int(ev.get("stride", 3 * model_cfg.patch_size // 4))
    threshold = float(ev.get("threshold", THRESHOLD))
    return model_cfg, train_cfg, data_spec, stride, threshold


def parse_runspec(text: str, base_dir=".") -> RunSpec:
    raw = yaml.safe_load(text) or {}
    if not isinstance(raw, dict):
        raise SpecError("run spec must be a mapping")
    _known(raw, {"seeds", "model", "train", "data", "eval", "out_root", "parallelism"}, "run spec")
    base = Path(base_dir)
    model_cfg, train_cfg, data_spec, stride, threshold = _parse_common(raw, base)
    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, list):
        seeds = [seeds]
    out_root = Path(raw.get("out_root", "runs"))
    spec = RunSpec(
        seeds=[int(s) for s in seeds],
        model=model_cfg,
        train=train_cfg,
        data=data_spec,
        stride=stride,
        threshold=threshold,
        out_root=out_root if out_root.is_absolute() else base / out_root,
        parallelism=int(raw.get("parallelism", 1)),
    )
    spec.validate()
    return spec


def load_runspec(path) -> RunSpec:
    path = Path(path)
    return parse_runspec(path.read_text(), path.parent)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    raw = yaml.safe_load(path.read_text())
    model_cfg, train_cfg, data_spec, stride, threshold = _parse_common(raw, path.parent)
    seed = int(raw["seed"])
    return RunConfig(
        seed=seed,
        model=model_cfg,
        train=replace(train_cfg, seed=seed),
        data=data_spec,
        stride=stride,
        threshold=threshold,
        run_dir=Path(raw.get("run_dir", path.parent)),
    )


def expand_runspec(spec: RunSpec) -> list[RunConfig]:
    """One RunConfig per seed, each with a fresh ``<out_root>/run-<seed>`` holding
    its materialized config.  Existing run directories are never reused."""
    spec.validate()
    dirs = [spec.run_dir(s) for s in spec.seeds]
    taken = [d for d in dirs if d.exists()]
    if taken:
        raise FileExistsError(f"run directory already exists, refusing to overwrite: {taken[0]}")
    configs = []
    for seed, run_dir in zip(spec.seeds, dirs):
        cfg = RunConfig(
            seed=seed,
            model=spec.model,
            train=replace(spec.train, seed=seed),
            data=spec.data,
            stride=spec.stride,
            threshold=spec.threshold,
            run_dir=run_dir,
        )
        run_dir.mkdir(parents=True)
        cfg.config_path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
        configs.append(cfg)
    return configs


# ---------------------------------------------------------------------------
# single run


def thread_limit() -> int:
    value = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(value)
    except ValueError:
        raise SpecError(f"{THREADS_ENV} must be an integer, got {value!r}") from None
    return max(1, n)


def _scenes(cfg: RunConfig) -> tuple[list[datapipe.Scene], list[datapipe.Scene]]:
    return datapipe.split_scenes(cfg.data.load(), cfg.data.test_fraction)


def train_run(cfg: RunConfig) -> RunResult:
    from threadpoolctl import threadpool_limits

    cfg.model.validate()
    cfg.train.validate()
    train_scenes, _ = _scenes(cfg)
    patch = cfg.model.patch_size
    patches = datapipe.extract_train_patches([datapipe.crop_to_grid(s, patch) for s in train_scenes], patch)
    split = datapipe.split_train_val(patches, 0.8, cfg.seed)
    with threadpool_limits(limits=thread_limit()):
        return train(cfg.model, cfg.train, split, cfg.run_dir / MODEL_DIR)


def evaluate_run(cfg: RunConfig, trained: RunResult | None = None) -> RunResult:
    """Evaluate the best checkpoint of a trained run on the held-out scenes and
    write ``eval.csv`` and ``result.json``."""
    from threadpoolctl import threadpool_limits

    if trained is None:
        trained = RunResult.from_dict(json.loads((cfg.run_dir / MODEL_DIR / "train_summary.json").read_text()))
    _, test_scenes = _scenes(cfg)
    params, _ = load_checkpoint(cfg.run_dir / MODEL_DIR / CHECKPOINT_FILE, cfg.model)
    with threadpool_limits(limits=thread_limit()):
        report = evaluate(params, test_scenes, cfg.model.patch_size, cfg.stride, threshold=cfg.threshold)
    report.write_csv(cfg.run_dir / EVAL_FILE)
    result = replace(
        trained,
        test_acc=report.overall_accuracy,
        test_acc_mean_scene=report.mean_scene_accuracy,
        avg_infer_time_s=report.total_infer_time / len(test_scenes),
        total_infer_time_s=report.total_infer_time,
    )
    write_result(cfg.run_dir, result)
    return result


def write_result(run_dir: Path, result: RunResult) -> Path:
    path = Path(run_dir) / RESULT_FILE
    path.write_text(json.dumps(result.to_dict(), indent=2))
    return path


def failed_result(seed: int, error: str) -> RunResult:
    nan = float("nan")
    return RunResult(seed, 0, 0, nan, nan, nan, nan, "", "", status="failed", error=error)


def run_one(cfg: RunConfig) -> RunResult:
    """Train and evaluate one run; failures come back as a 'failed' result."""
    try:
        return evaluate_run(cfg, train_run(cfg))
    except Exception as exc:  # reported per run, siblings keep going
        log.error("run seed=%s failed: %s", cfg.seed, exc)
        result = failed_result(cfg.seed, f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}")
        if cfg.run_dir.exists():
            write_result(cfg.run_dir, result)
        return result


def execute_runs(configs: Sequence[RunConfig], parallelism: int = 1) -> list[RunResult]:
    """Run each config in its own worker process, at most ``parallelism`` at a time.

    Results come back in config order regardless of completion order.
    """
    ctx = multiprocessing.get_context("spawn")
    with cf.ProcessPoolExecutor(max_workers=parallelism, mp_context=ctx) as pool:
        futures = [pool.submit(run_one, cfg) for cfg in configs]
        results = []
        for cfg, fut in zip(configs, futures):
            try:
                results.append(fut.result())
            except Exception as exc:  # worker died outright
                result = failed_result(cfg.seed, f"{type(exc).__name__}: {exc}")
                if cfg.run_dir.exists():
                    write_result(cfg.run_dir, result)
                results.append(result)
    return results


def run_benchmark(spec: RunSpec) -> list[RunResult]:
    return execute_runs(expand_runspec(spec), spec.parallelism)


# ---------------------------------------------------------------------------
# reporting

# (header, RunResult attribute, scale, decimals)
COLUMNS = [
    ("Epochs", "epochs_run", 1.0, 1),
    ("Best Epoch", "best_epoch", 1.0, 1),
    ("Train Acc.", "train_acc", 1.0, 3),
    ("Test Acc.", "test_acc", 1.0, 3),
    ("Avg. Train Time (s/epoch)", "avg_epoch_time_s", 1.0, 2),
    ("Train Time (min/run)", "total_train_time_s", 1 / 60, 2),
    ("Avg. Inference Time (s/scene)", "avg_infer_time_s", 1.0, 2),
]


@dataclass
class BenchReport:
    rows: list[RunResult]
    means: dict[str, float] = field(default_factory=dict)
    stds: dict[str, float] = field(default_factory=dict)

    @property
    def ok_rows(self) -> list[RunResult]:
        return [r for r in self.rows if r.status == "ok"]

    def value(self, row: RunResult, attr: str) -> float:
        scale = next(s for _, a, s, _ in COLUMNS if a == attr)
        v = getattr(row, attr)
        return float("nan") if v is None else v * scale

    def formatted(self, attr: str, value: float) -> str:
        decimals = next(d for _, a, _, d in COLUMNS if a == attr)
        if value is None or (isinstance(value, float) and math.isnan(value)):
            return "nan"
        if attr in ("epochs_run", "best_epoch") and float(value).is_integer():
            return str(int(value))
        return f"{value:.{decimals}f}"

    def table(self) -> list[list[str]]:
        header = ["Seed"] + [h for h, *_ in COLUMNS]
        lines = [header]
        for r in self.rows:
            if r.status != "ok":
                lines.append([str(r.seed)] + ["FAILED"] + [""] * (len(COLUMNS) - 1))
                continue
            lines.append([str(r.seed)] + [self.formatted(a, self.value(r, a)) for _, a, _, _ in COLUMNS])
        lines.append(["mean"] + [self.formatted(a, self.means[a]) for _, a, _, _ in COLUMNS])
        lines.append(["std"] + [self.formatted(a, self.stds[a]) for _, a, _, _ in COLUMNS])
        return lines

    def render_text(self) -> str:
        table = self.table()
        widths = [max(len(row[i]) for row in table) for i in range(len(table[0]))]
        out = []
        for k, row in enumerate(table):
            out.append("  ".join(cell.rjust(w) for cell, w in zip(row, widths)))
            if k == 0:
                out.append("  ".join("-" * w for w in widths))
        return "\n".join(out) + "\n"

    def render_csv(self) -> str:
        return "\n".join(",".join(row) for row in self.table()) + "\n"

    def write(self, out_dir) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        csv_path, txt_path = out_dir / REPORT_CSV, out_dir / REPORT_TXT
        csv_path.write_text(self.render_csv())
        txt_path.write_text(self.render_text())
        return csv_path, txt_path


def aggregate(results: Sequence[RunResult]) -> BenchReport:
    """Per-column mean and sample standard deviation over successful runs.

    Rows are ordered by seed, so the report does not depend on run order.  The
    std of a single run is reported as 0.
    """
    if not results:
        raise ValueError("aggregate needs at least one run result")
    rows = sorted(results, key=lambda r: r.seed)
    report = BenchReport(rows)
    ok = report.ok_rows
    for _, attr, _, _ in COLUMNS:
        values = [report.value(r, attr) for r in ok]
        values = [v for v in values if not math.isnan(v)]
        if not values:
            report.means[attr] = report.stds[attr] = float("nan")
            continue
        report.means[attr] = statistics.mean(values)
        report.stds[attr] = statistics.stdev(values) if len(values) > 1 else 0.0
    return report


def collect_results(out_root) -> list[RunResult]:
    results = []
    for run_dir in sorted(Path(out_root).glob("run-*")):
        path = run_dir / RESULT_FILE
        if path.exists():
            results.append(RunResult.from_dict(json.loads(path.read_text())))
    return results


def report_from_dirs(out_root) -> BenchReport:
    results = collect_results(out_root)
    if not results:
        raise FileNotFoundError(f"no run results under {out_root}")
    return aggregate(results)


# ---------------------------------------------------------------------------
# job scripts


def template_placeholders(template: str) -> list[str]:
    return _PLACEHOLDER.findall(template)


def render_job(template: str, cfg: RunConfig) -> str:
    names = template_placeholders(template)
    unknown = sorted(set(names) - set(ALLOWED_PLACEHOLDERS))
    if unknown:
        raise SpecError(
            f"unknown template placeholder(s) {unknown}; allowed: {list(ALLOWED_PLACEHOLDERS)}"
        )
    values = {"seed": str(cfg.seed), "run_dir": str(cfg.run_dir), "config_path": str(cfg.config_path)}
    return _PLACEHOLDER.sub(lambda m: values[m.group(1)], template)


def emit_job_scripts(spec: RunSpec, template: str = DEFAULT_JOB_TEMPLATE) -> list[Path]:
    """Materialize run dirs and write ``<out_root>/run-<seed>.sh`` per seed.

    Nothing is submitted.
    """
    names = template_placeholders(template)
    unknown = sorted(set(names) - set(ALLOWED_PLACEHOLDERS))
    if unknown:
        raise SpecError(
            f"unknown template placeholder(s) {unknown}; allowed: {list(ALLOWED_PLACEHOLDERS)}"
        )
    if not names:
        warnings.warn("job template has no placeholders; every script will be identical", stacklevel=2)
    paths = []
    for cfg in expand_runspec(spec):
        path = spec.out_root / f"run-{cfg.seed}.sh"
        path.write_text(render_job(template, cfg))
        path.chmod(0o755)
        paths.append(path)
    return paths
