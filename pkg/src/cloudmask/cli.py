"""Command line entry point: ``cloudmask <subcommand> ...``.

Every subcommand prints ``key=value`` lines on stdout (paths, metrics) and logs
progress to stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench, datapipe
from .ndtensor import bce_loss, grad_check
from .unet import UNetConfig, build_unet, unet_forward

log = logging.getLogger("cloudmask")

GRADCHECK_THRESHOLDS = {"float32": 1e-2, "float64": 1e-6}
GRADCHECK_EPS = {"float32": 1e-3, "float64": 1e-4}


def _emit(**kv) -> None:
    for k, v in kv.items():
        print(f"{k}={v}")


def cmd_gen_data(args) -> int:
    scenes = datapipe.generate_dataset(args.scenes, args.height, args.width, args.seed)
    path = datapipe.write_dataset(args.out, scenes)
    _emit(dataset=path, scenes=len(scenes))
    return 0


def cmd_train(args) -> int:
    cfg = bench.load_run_config(args.config)
    result = bench.train_run(cfg)
    _emit(metrics=result.metrics_log, checkpoint=result.checkpoint, epochs_run=result.epochs_run,
          best_epoch=result.best_epoch)
    return 0


def cmd_evaluate(args) -> int:
    run_dir = Path(args.run_dir)
    cfg = bench.load_run_config(run_dir / bench.RUN_CONFIG_FILE)
    result = bench.evaluate_run(cfg)
    _emit(eval=run_dir / bench.EVAL_FILE, result=run_dir / bench.RESULT_FILE, test_acc=result.test_acc)
    return 0


def cmd_bench(args) -> int:
    spec = bench.load_runspec(args.spec)
    if args.parallelism is not None:
        spec.parallelism = args.parallelism
    results = bench.run_benchmark(spec)
    report = bench.aggregate(results)
    csv_path, txt_path = report.write(spec.out_root)
    sys.stderr.write(report.render_text())
    for r in results:
        _emit(**{f"run_{r.seed}": spec.run_dir(r.seed), f"status_{r.seed}": r.status})
    _emit(report_csv=csv_path, report_txt=txt_path)
    return 0 if all(r.status == "ok" for r in results) else 1


def cmd_report(args) -> int:
    report = bench.report_from_dirs(args.root)
    csv_path, txt_path = report.write(args.root)
    sys.stderr.write(report.render_text())
    _emit(report_csv=csv_path, report_txt=txt_path)
    return 0


def gradcheck_unet(seed: int = 0, dtype: str = "float32", eps: float | None = None) -> float:
    """Worst relative gradient error of a depth-1 U-Net BCE loss w.r.t. its input."""
    np_dtype = np.dtype(dtype)
    cfg = UNetConfig(in_channels=9, depth=1, base_channels=8, patch_size=8)
    params = build_unet(cfg, seed, dtype=np_dtype)
    rng = np.random.default_rng(seed + 1)
    x = rng.normal(size=(1, 9, 8, 8)).astype(np_dtype)
    t = (rng.random((1, 1, 8, 8)) > 0.5).astype(np_dtype)
    return grad_check(lambda xt: bce_loss(unet_forward(params, xt), t), [x], eps or GRADCHECK_EPS[dtype])


def cmd_gradcheck(args) -> int:
    threshold = args.threshold if args.threshold is not None else GRADCHECK_THRESHOLDS[args.dtype]
    err = gradcheck_unet(args.seed, args.dtype)
    ok = err < threshold
    _emit(max_rel_error=f"{err:.3e}", threshold=f"{threshold:g}", dtype=args.dtype,
          result="PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_emit_jobs(args) -> int:
    spec = bench.load_runspec(args.spec)
    template = Path(args.template).read_text() if args.template else bench.DEFAULT_JOB_TEMPLATE
    for path in bench.emit_job_scripts(spec, template):
        _emit(script=path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cloudmask", description="Desk-scale cloud-masking benchmark")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-data", help="write a synthetic dataset file")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=40)
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one materialized run config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a trained run directory on its test scenes")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="run a multi-seed campaign and write the report")
    p.add_argument("--spec", required=True)
    p.add_argument("--parallelism", type=int)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="rebuild the report from run directories")
    p.add_argument("--root", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcheck", help="finite-difference check of the U-Net gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", choices=sorted(GRADCHECK_THRESHOLDS), default="float32")
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("emit-jobs", help="write one scheduler script per seed (no submission)")
    p.add_argument("--spec", required=True)
    p.add_argument("--template", help="script template using {seed}, {run_dir}, {config_path}")
    p.set_defaults(func=cmd_emit_jobs)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except Exception as exc:
        print(f"cloudmask {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
