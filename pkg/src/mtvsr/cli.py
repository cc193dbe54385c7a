"""Command-line entry point.

Subcommands::

    mtvsr superres --channel t1=a.nii.gz,b.nii.gz --channel t2=c.nii.gz -o out/
    mtvsr denoise  --channel t1=noisy_t1.nii.gz --channel t2=noisy_t2.nii.gz -o out/
    mtvsr simulate -o sim/ --thickness 4 --noise 2 --seed 0
    mtvsr bench    -o bench/ --seeds 0 1 2

Exit codes: 0 converged, 2 stopped at ``--max-iter`` (outputs still
written), 1 error. ``report.json`` is written to the output directory on
every exit path that gets far enough to know it. Log level comes from
``MTVSR_LOG_LEVEL`` (default ``WARNING``).
"""

import argparse
import csv
import logging
import os
from pathlib import Path
import sys
import time

import numpy as np

from . import harness
from .image_io import RunReport, read_volume, write_report, write_volume
from .pipeline import METHODS, reconstruct

logger = logging.getLogger("mtvsr")

EXIT_CONVERGED = 0
EXIT_ERROR = 1
EXIT_MAX_ITER = 2

LOG_ENV = "MTVSR_LOG_LEVEL"


def _parse_channel(text):
    name, sep, paths = text.partition("=")
    if not sep or not name or not paths:
        raise argparse.ArgumentTypeError(f"expected name=path[,path...], got {text!r}")
    return name, [p for p in paths.split(",") if p]


def _parse_named_float(text):
    name, sep, value = text.partition("=")
    if not sep or not name:
        raise argparse.ArgumentTypeError(f"expected name=value, got {text!r}")
    try:
        return name, float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number in {text!r}") from None


def _solver_args(p):
    p.add_argument("--method", choices=METHODS, default="mtv")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--rho", type=float, default=None, help="fixed ADMM penalty (skips the rho rule)")
    p.add_argument("--rho-rule", choices=("scaled", "heuristic"), default="scaled", help="rule for the initial rho")
    p.add_argument("--fixed-rho", action="store_true", help="keep rho fixed instead of balancing residuals")
    p.add_argument("--inner-solver", choices=("multigrid", "cg"), default="multigrid")
    p.add_argument("--newton-steps", type=int, default=10)
    p.add_argument("--lambda", dest="lam", action="append", type=_parse_named_float, default=[],
                   metavar="NAME=VALUE", help="per-channel regularisation override")
    p.add_argument("--tau", action="append", type=_parse_named_float, default=[],
                   metavar="NAME=VALUE", help="per-channel noise precision override")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0, help="recorded in the report; reconstruction is deterministic")


def build_parser():
    parser = argparse.ArgumentParser(prog="mtvsr", description="Multi-channel TV super-resolution for MR volumes.")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (("superres", "reconstruct HR volumes from thick-slice inputs"),
                            ("denoise", "denoise volumes that share one grid")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--channel", action="append", type=_parse_channel, required=True,
                       metavar="NAME=PATH[,PATH...]")
        p.add_argument("-o", "--output", required=True, type=Path)
        _solver_args(p)
        if name == "superres":
            p.add_argument("--voxel-size", type=float, default=1.0)
            p.add_argument("--gap-ratio", type=float, default=1.0 / 3.0)
            p.add_argument("--profile", choices=("gaussian", "box"), default="gaussian")

    p = sub.add_parser("simulate", help="write a phantom and degraded LR observations")
    p.add_argument("-o", "--output", required=True, type=Path)
    p.add_argument("--dims", type=int, nargs=3, default=[32, 32, 32])
    p.add_argument("--channels", type=int, default=2)
    p.add_argument("--thickness", type=float, default=4.0)
    p.add_argument("--gap-ratio", type=float, default=1.0 / 3.0)
    p.add_argument("--noise", type=float, default=2.0, help="percent of mean tissue intensity")
    p.add_argument("--profile", choices=("gaussian", "box"), default="gaussian")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--strict", action="store_true", help="restrict thickness to [2, 8] mm")

    p = sub.add_parser("bench", help="method comparison and inner-solver traces on the phantom")
    p.add_argument("-o", "--output", required=True, type=Path)
    p.add_argument("--dims", type=int, nargs=3, default=[32, 32, 32])
    p.add_argument("--thickness", type=float, default=4.0)
    p.add_argument("--noise", type=float, default=2.0)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--trace-iters", type=int, default=50)
    p.add_argument("--threads", type=int, default=1)
    return parser


def _overrides(pairs, channels, what):
    out = dict(pairs)
    unknown = set(out) - set(channels)
    if unknown:
        raise ValueError(f"{what} override for unknown channel(s): {sorted(unknown)}")
    for name, value in out.items():
        if not value > 0:
            raise ValueError(f"{what} for channel {name!r} must be positive, got {value}")
    return out


def _load_channels(groups):
    channels = {}
    for name, paths in groups:
        if name in channels:
            raise ValueError(f"channel {name!r} given twice; list all its files in one --channel flag")
        channels[name] = [read_volume(p) for p in paths]
    return channels


def _run_reconstruction(args, denoise):
    args.output.mkdir(parents=True, exist_ok=True)
    report_path = args.output / "report.json"
    try:
        channels = _load_channels(args.channel)
        kwargs = dict(
            tau_override=_overrides(args.tau, channels, "tau") or None,
            lam_override=_overrides(args.lam, channels, "lambda") or None,
        )
        if args.method != "bs":
            kwargs.update(
                tol=args.tol,
                max_iter=args.max_iter,
                rho=args.rho,
                rho_rule=args.rho_rule,
                adapt_rho=not args.fixed_rho,
                inner_solver=args.inner_solver,
                newton_steps=args.newton_steps,
                threads=args.threads,
            )
            if not denoise:
                kwargs["profile"] = {"kind": args.profile, "gap_ratio": args.gap_ratio}
        voxel_size = getattr(args, "voxel_size", 1.0)
        out, report = reconstruct(channels, args.method, voxel_size=voxel_size, denoise=denoise, **kwargs)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        failed = RunReport(method=args.method, channels=[n for n, _ in args.channel], error=str(exc))
        write_report(failed, report_path)
        return EXIT_ERROR

    for name, vol in zip(channels, out):
        write_volume(vol, args.output / f"{name}_{'denoised' if denoise else 'hr'}.nii.gz")
    report.notes.append(f"seed {args.seed}")
    write_report(report, report_path)
    if report.converged:
        return EXIT_CONVERGED
    logger.warning("stopped after %d iterations without meeting tol %g", report.iterations, args.tol)
    return EXIT_MAX_ITER


def run_superres(args):
    return _run_reconstruction(args, denoise=False)


def run_denoise(args):
    return _run_reconstruction(args, denoise=True)


def run_simulate(args):
    args.output.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        hr = harness.make_phantom(tuple(args.dims), args.channels, args.seed)
        axes = [2, 0, 1]
        specs, files = [], {}
        for c, h in enumerate(hr):
            spec = harness.DegradeSpec(axes[c % 3], args.thickness, args.gap_ratio, args.noise,
                                       args.seed * 1000 + c, args.profile)
            lr, _ = harness.degrade(h, spec, strict=args.strict)
            name = f"c{c}"
            write_volume(h, args.output / f"{name}_ref.nii.gz")
            write_volume(lr, args.output / f"{name}_lr.nii.gz")
            specs.append(spec)
            files[name] = {"reference": f"{name}_ref.nii.gz", "observations": [f"{name}_lr.nii.gz"]}
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        report = RunReport(method="simulate", error=str(exc))
        write_report(report, args.output / "report.json")
        return EXIT_ERROR
    harness.write_manifest(args.output / "manifest.json", seed=args.seed, dims=args.dims,
                           specs=specs, files=files)
    report = RunReport(method="simulate", channels=list(files), converged=True,
                       wall_seconds=time.perf_counter() - t0)
    write_report(report, args.output / "report.json")
    return EXIT_CONVERGED


def run_bench(args):
    args.output.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    rows = []
    traces = None
    try:
        for seed in args.seeds:
            hr, channels, specs = harness.standard_problem(seed, args.thickness, args.noise, tuple(args.dims))
            for row in harness.run_methods(hr, channels, threads=args.threads):
                row.seed, row.thickness = seed, args.thickness
                rows.append(row)
            if traces is None:
                traces = harness.compare_inner_solvers(hr, channels, max_iter=args.trace_iters)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        write_report(RunReport(method="bench", error=str(exc)), args.output / "report.json")
        return EXIT_ERROR

    harness.write_metrics_csv(rows, args.output / "metrics.csv")
    with open(args.output / "solver_traces.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["inner_solver", "iteration", "seconds", "objective"])
        for solver, trace in traces.items():
            for k, (sec, obj) in enumerate(trace):
                w.writerow([solver, k, f"{sec:.6f}", f"{obj:.9e}"])
    summary = {}
    for r in rows:
        summary.setdefault(r.method, []).append(r.psnr)
    harness.write_manifest(
        args.output / "manifest.json",
        seeds=args.seeds,
        dims=args.dims,
        thickness=args.thickness,
        noise_pct=args.noise,
        mean_psnr={k: float(np.mean(v)) for k, v in summary.items()},
        final_objective={k: v[-1][1] for k, v in traces.items()},
    )
    report = RunReport(method="bench", channels=sorted({r.channel for r in rows}), converged=True,
                       wall_seconds=time.perf_counter() - t0)
    write_report(report, args.output / "report.json")
    return EXIT_CONVERGED


COMMANDS = {"superres": run_superres, "denoise": run_denoise, "simulate": run_simulate, "bench": run_bench}


def main(argv=None):
    logging.basicConfig(level=os.environ.get(LOG_ENV, "WARNING").upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
