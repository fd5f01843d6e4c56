"""Command-line interface.

Subcommands: ``phantom gen``, ``preprocess``, ``reconstruct``, ``benchmark``,
``check {adjoint,oracle,convergence}``, ``params {show,validate}`` and
``worker`` (the child side of the external-reconstructor protocol).
Configuration precedence everywhere: command-line flags > parameter file >
built-in defaults; the effective configuration is echoed into every output
directory.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .dataio import (
    Split,
    build_manifest,
    read_raw_f32le,
    write_png16,
    write_raw_f32le,
)
from .errors import TomobenchError
from .geometry import ImageGrid, canonical_like_geometry, default_grid
from .metrics import records_csv, summary_markdown
from .phantoms import (
    analytic_sinogram,
    load_phantom,
    rasterize,
    save_phantom,
    stock_phantom,
)
from .preprocess import DetectorCalibration, flat_dark_correct, neg_log
from .projector import FanBeamProjector, Image, Sinogram, Stage
from .registry import ReconstructorDescriptor, default_registry, reconstruct, run_worker
from .solvers import (
    Regularizer,
    SolverConfig,
    VariationalProblem,
    agd,
    chambolle_pock_tv,
    fbp,
)
from .tasks import (
    ExperimentParams,
    build_task,
    default_params,
    format_params,
    read_params,
    run_experiment,
    write_params,
)
from . import dataio, report


def _fail(msg: str, code: int = 1) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def _load_params(args) -> ExperimentParams:
    """Parameter file (if any) with flag overrides applied."""
    if getattr(args, "params", None):
        p = read_params(args.params)
    else:
        p = default_params(getattr(args, "task", None) or "FullData",
                           getattr(args, "method", None) or "fbp")
    if getattr(args, "task", None):
        p.task = build_task(args.task)
    if getattr(args, "method", None):
        p.method = args.method
    solver = p.solver
    if getattr(args, "iters", None) is not None:
        solver = replace(solver, max_iters=args.iters)
    if getattr(args, "filter", None):
        solver = replace(solver, filter=SolverConfig(filter=args.filter).filter)
    if getattr(args, "seed", None) is not None:
        solver = replace(solver, seed=args.seed)
        p.seed = args.seed
    p.solver = solver
    if getattr(args, "tv_weight", None) is not None:
        p.tv_weight = args.tv_weight
    return p


def _descriptor(method: str, p: ExperimentParams) -> ReconstructorDescriptor:
    config = {
        "max_iters": p.solver.max_iters,
        "step_scale": p.solver.step_scale,
        "filter": p.solver.filter.value,
        "tolerance": p.solver.tolerance,
        "seed": p.solver.seed,
        "tv_weight": p.tv_weight,
    }
    return ReconstructorDescriptor(name=method, category="Classical", config=config)


# ----------------------------------------------------------------------
# phantom gen
# ----------------------------------------------------------------------


def cmd_phantom_gen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.phantom_file:
        phantom = load_phantom(args.phantom_file)
        name = Path(args.phantom_file).stem
    else:
        phantom = stock_phantom(args.name)
        name = args.name
    g = canonical_like_geometry(args.angles, args.det)
    grid = ImageGrid(args.grid, args.grid, args.fov / args.grid)
    img = rasterize(phantom, grid, supersample=args.supersample)
    sino = analytic_sinogram(phantom, g)
    save_phantom(out / f"{name}.txt", phantom)
    write_raw_f32le(out / f"{name}_image.raw", img.values)
    write_png16(out / f"{name}_image.png", img.values)
    write_raw_f32le(out / f"{name}_sinogram.raw", sino.values)
    write_png16(out / f"{name}_sinogram.png", sino.values)
    print(f"wrote {name} fixtures to {out} "
          f"(image {grid.shape}, sinogram {sino.values.shape})")
    return 0


# ----------------------------------------------------------------------
# preprocess
# ----------------------------------------------------------------------


def cmd_preprocess(args) -> int:
    counts = read_raw_f32le(args.counts)
    dark = read_raw_f32le(args.dark)
    flat = read_raw_f32le(args.flat)

    def squeeze(a):
        return a[0] if a.ndim == 2 and a.shape[0] == 1 else a

    cal = DetectorCalibration(dark=squeeze(dark), flat=squeeze(flat))
    geom = dataio.infer_geometry(counts, None)
    raw = Sinogram(geom, counts, stage=Stage.COUNTS)
    line = neg_log(flat_dark_correct(raw, cal, floor=args.floor))
    write_raw_f32le(args.out, line.values)
    print(f"wrote line-integral sinogram {line.values.shape} to {args.out}")
    return 0


# ----------------------------------------------------------------------
# reconstruct
# ----------------------------------------------------------------------


def cmd_reconstruct(args) -> int:
    if not Path(args.sinogram).exists():
        return _fail(f"sinogram path does not exist: {args.sinogram}")
    p = _load_params(args)
    values = read_raw_f32le(args.sinogram)
    if args.params:
        geom = p.geometry
    else:
        geom = dataio.infer_geometry(values, None)
        p.geometry = geom
    grid = p.grid
    if args.grid_px is not None:
        if args.fov is not None:
            grid = ImageGrid(args.grid_px, args.grid_px, args.fov / args.grid_px)
        else:
            grid = default_grid(geom, args.grid_px)
        p.grid = grid
    y = Sinogram(geom, values, stage=Stage.LINE_INTEGRAL)
    desc = _descriptor(p.method, p)
    img = reconstruct(desc, y, grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_raw_f32le(out / "image.raw", img.values)
    write_png16(out / "image.png", img.values)
    report.save_image_figure(img.values, out / "image_figure.png",
                             title=f"{p.method} on {Path(args.sinogram).name}")
    write_params(out / "effective_params.txt", p)
    print(f"reconstructed {grid.shape} image with {p.method} -> {out}")
    return 0


# ----------------------------------------------------------------------
# benchmark
# ----------------------------------------------------------------------


def cmd_benchmark(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = build_manifest(args.data_root)
    methods = [m.strip() for m in args.method.split(",") if m.strip()]
    registry = default_registry()
    split = Split(args.split)

    rows = []
    summaries = {}
    montage = {}
    failures = []
    status = 0
    try:
        for method in methods:
            p = _load_params(args)
            p.method = method
            # mini datasets may not be at canonical scale; infer the geometry
            # from the first slice unless a parameter file pinned one
            if not args.params:
                first = manifest.ids(split)[0]
                entry = manifest.entry(first)
                mdir = entry.modes[p.task.source_mode.value]
                shape = read_raw_f32le(mdir / "counts.raw").shape
                p.geometry = dataio.infer_geometry(np.empty(shape), None)
                if entry.has_reference:
                    ref_shape = read_raw_f32le(entry.path / "mode2" / "reference.raw").shape
                    p.grid = ImageGrid(
                        ref_shape[1], ref_shape[0],
                        default_grid(p.geometry, ref_shape[1]).pixel_size,
                    )
            desc = _descriptor(method, p)
            registry.get(method)  # fail early on unknown names

            def recon(y, grid, desc=desc):
                return reconstruct(desc, y, grid)

            result = run_experiment(p, manifest, split, recon, jobs=args.jobs)
            for sid, img, record in result.results:
                rows.append((p.task.name, method, record))
            summaries[(p.task.name, method)] = result.summary
            failures.extend((method, f) for f in result.failures)
            if result.results:
                montage[method] = result.results[0][1].values
            write_params(out / f"effective_params_{method}.txt", p)
    finally:
        # partial results are still flushed when a method fails mid-run
        (out / "records.csv").write_text(records_csv(rows), encoding="utf-8")
        if summaries:
            (out / "summary.md").write_text(
                summary_markdown(summaries), encoding="utf-8"
            )
            report.save_metric_bars(summaries, "ssim", out / "fig_ssim.png")
            report.save_metric_bars(summaries, "psnr", out / "fig_psnr.png")
        if montage:
            report.save_montage(montage, out / "fig_reconstructions.png")

    for method, f in failures:
        print(f"slice failure [{method}]: slice {f.slice_id}: {f.error}",
              file=sys.stderr)
    for (task, method), s in sorted(summaries.items()):
        print(f"{task} / {method}: SSIM {s.cell('ssim')}  PSNR {s.cell('psnr')} "
              f"(n={s.n}, inf-psnr excluded={s.psnr_inf_excluded})")
    print(f"report written to {out}")
    return status


# ----------------------------------------------------------------------
# check suites
# ----------------------------------------------------------------------


def cmd_check_adjoint(args) -> int:
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for n_px in (32, 64, 128):
        for n_ang in (30, 90, 360):
            g = canonical_like_geometry(n_ang, 2 * n_px)
            grid = ImageGrid(n_px, n_px, 110.0 / n_px)
            op = FanBeamProjector(g, grid)
            for _ in range(args.pairs):
                x = rng.standard_normal(grid.shape)
                y = rng.standard_normal((g.n_angles, g.detector_pixel_count))
                ax = op.forward_project(Image(grid, x)).values
                aty = op.adjoint(Sinogram(g, y)).values
                num = abs(np.vdot(ax, y) - np.vdot(x, aty))
                den = np.linalg.norm(ax) * np.linalg.norm(y)
                rel = num / den
                worst = max(worst, rel)
            print(f"adjoint {n_px}px/{n_ang}ang: worst rel residual {worst:.3e}")
    ok = worst <= 1e-6
    print(f"adjoint identity: {'PASS' if ok else 'FAIL'} (residual {worst:.3e} vs 1e-06)")
    return 0 if ok else 1


def cmd_check_oracle(args) -> int:
    g = canonical_like_geometry(90, 256)
    phantom = stock_phantom("three_ellipse")
    sino = analytic_sinogram(phantom, g).values
    errs = []
    for n in (128, 256):
        grid = ImageGrid(n, n, 116.0 / n)
        img = rasterize(phantom, grid)
        fwd = FanBeamProjector(g, grid).forward_project(img).values
        rel = np.linalg.norm(fwd - sino) / np.linalg.norm(sino)
        errs.append(rel)
        print(f"oracle consistency at grid {n}: rel L2 {rel:.5f}")
    ok = errs[-1] <= 0.02 and errs[1] < errs[0]
    print(f"oracle consistency: {'PASS' if ok else 'FAIL'} "
          f"(<=0.02 at 256 and decreasing)")
    return 0 if ok else 1


def cmd_check_convergence(args) -> int:
    g = canonical_like_geometry(60, 96)
    grid = ImageGrid(32, 32, 80.0 / 32)
    op = FanBeamProjector(g, grid)
    rng = np.random.default_rng(args.seed)
    x_true = rng.random(grid.shape)
    y = op.forward_project(Image(grid, x_true))
    img_a, rep_a = agd(VariationalProblem(op, y), SolverConfig(max_iters=500))
    ratio = rep_a.objective_trace[-1] / rep_a.objective_trace[0]
    print(f"agd objective ratio after {rep_a.iterations_run} iters: {ratio:.3e}")
    img_c, rep_c = chambolle_pock_tv(
        VariationalProblem(op, y, regularizer=Regularizer("tv", 0.0)),
        SolverConfig(max_iters=3000),
    )
    rel = np.linalg.norm(img_c.values - img_a.values) / np.linalg.norm(img_a.values)
    print(f"chambolle-pock (lambda=0) vs agd: rel L2 {rel:.3e}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report.save_convergence(
            {"agd": rep_a.objective_trace, "chp": rep_c.objective_trace},
            out / "convergence.png",
        )
    ok = ratio <= 1e-6 and rel <= 2e-3
    print(f"convergence: {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


# ----------------------------------------------------------------------
# params tooling
# ----------------------------------------------------------------------


def cmd_params_show(args) -> int:
    p = read_params(args.file)
    sys.stdout.write(format_params(p))
    return 0


def cmd_params_validate(args) -> int:
    try:
        read_params(args.file)
    except TomobenchError as e:
        return _fail(str(e))
    print(f"{args.file}: valid parameter file")
    return 0


# ----------------------------------------------------------------------
# external-protocol worker
# ----------------------------------------------------------------------


def cmd_worker(args) -> int:
    config = {
        "max_iters": args.iters if args.iters is not None else 100,
        "seed": args.seed,
        "tv_weight": args.tv_weight if args.tv_weight is not None else 0.0,
    }
    if args.filter:
        config["filter"] = args.filter
    payload = sys.stdin.buffer.read()
    sys.stdout.buffer.write(run_worker(payload, args.method, config))
    sys.stdout.buffer.flush()
    return 0


# ----------------------------------------------------------------------
# argument wiring
# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="tomobench",
        description="Fan-beam CT reconstruction toolbox and benchmark harness",
    )
    ap.add_argument("--version", action="version", version=f"tomobench {__version__}")
    ap.add_argument("--seed", type=int, default=None, help="global deterministic seed")
    sub = ap.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="phantom fixtures")
    ph_sub = ph.add_subparsers(dest="phantom_cmd", required=True)
    gen = ph_sub.add_parser("gen", help="write phantom image + analytic sinogram")
    gen.add_argument("--name", default="three_ellipse",
                     help="stock phantom name (disk, three_ellipse, bead_ring)")
    gen.add_argument("--phantom-file", default=None,
                     help="declarative ellipse file instead of a stock name")
    gen.add_argument("--out", required=True)
    gen.add_argument("--grid", type=int, default=256)
    gen.add_argument("--fov", type=float, default=116.0, help="field of view, mm")
    gen.add_argument("--angles", type=int, default=360)
    gen.add_argument("--det", type=int, default=256)
    gen.add_argument("--supersample", type=int, default=1)
    gen.set_defaults(func=cmd_phantom_gen)

    pre = sub.add_parser("preprocess", help="counts + calibration -> line integrals")
    pre.add_argument("--counts", required=True)
    pre.add_argument("--dark", required=True)
    pre.add_argument("--flat", required=True)
    pre.add_argument("--out", required=True)
    pre.add_argument("--floor", type=float, default=1e-6,
                     help="transmission clamp before the log")
    pre.set_defaults(func=cmd_preprocess)

    rec = sub.add_parser("reconstruct", help="sinogram -> image")
    rec.add_argument("--sinogram", required=True)
    rec.add_argument("--method", default=None, help="fbp | agd | chp_tv")
    rec.add_argument("--params", default=None, help="parameter file")
    rec.add_argument("--out", required=True)
    rec.add_argument("--grid", dest="grid_px", type=int, default=None)
    rec.add_argument("--fov", type=float, default=None,
                     help="field of view in mm (default: detector-matched pixels)")
    rec.add_argument("--iters", type=int, default=None)
    rec.add_argument("--filter", default=None, choices=["ramlak", "hann"])
    rec.add_argument("--lambda", dest="tv_weight", type=float, default=None)
    rec.set_defaults(func=cmd_reconstruct)

    ben = sub.add_parser("benchmark", help="run methods over a dataset split")
    ben.add_argument("--data-root", required=True)
    ben.add_argument("--task", default="FullData")
    ben.add_argument("--method", default="fbp", help="comma-separated method list")
    ben.add_argument("--split", default="validation",
                     choices=[s.value for s in Split])
    ben.add_argument("--params", default=None)
    ben.add_argument("--out", required=True)
    ben.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                     help="slice-level parallelism (default: available cores)")
    ben.add_argument("--iters", type=int, default=None)
    ben.add_argument("--filter", default=None, choices=["ramlak", "hann"])
    ben.add_argument("--lambda", dest="tv_weight", type=float, default=None)
    ben.set_defaults(func=cmd_benchmark)

    chk = sub.add_parser("check", help="property suites")
    chk_sub = chk.add_subparsers(dest="check_cmd", required=True)
    adj = chk_sub.add_parser("adjoint")
    adj.add_argument("--pairs", type=int, default=3, help="random pairs per cell")
    adj.set_defaults(func=cmd_check_adjoint)
    orc = chk_sub.add_parser("oracle")
    orc.set_defaults(func=cmd_check_oracle)
    cnv = chk_sub.add_parser("convergence")
    cnv.add_argument("--out", default=None, help="directory for the trace figure")
    cnv.set_defaults(func=cmd_check_convergence)

    par = sub.add_parser("params", help="parameter-file tooling")
    par_sub = par.add_subparsers(dest="params_cmd", required=True)
    shw = par_sub.add_parser("show")
    shw.add_argument("file")
    shw.set_defaults(func=cmd_params_show)
    val = par_sub.add_parser("validate")
    val.add_argument("file")
    val.set_defaults(func=cmd_params_validate)

    wrk = sub.add_parser("worker", help="external-protocol child (stdin -> stdout)")
    wrk.add_argument("--method", required=True)
    wrk.add_argument("--iters", type=int, default=None)
    wrk.add_argument("--filter", default=None, choices=["ramlak", "hann"])
    wrk.add_argument("--lambda", dest="tv_weight", type=float, default=None)
    wrk.set_defaults(func=cmd_worker)

    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.seed is None:
        args.seed = 0
    try:
        return args.func(args)
    except TomobenchError as e:
        return _fail(str(e))
    except FileNotFoundError as e:
        return _fail(str(e))


if __name__ == "__main__":
    sys.exit(main())
