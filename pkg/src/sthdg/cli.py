"""Command-line interface: `st-hdg run | converge | projection-rates`.

Configuration comes from a TOML or JSON file plus flag overrides (flags
win).  Every command writes `run.json` with the resolved configuration and
an environment stamp.  Exit codes: 0 success, 2 configuration error,
3 solver failure.
"""

from __future__ import annotations

import argparse
import csv
import pathlib
import sys

from .march import SolverError
from .mesh import MeshError
from .problems import HarmonicWave
from .reports import (SCHEMA_VERSION, ConfigError, RunConfig, run_simulation,
                      run_study, surface_profile, surface_profile_csv,
                      write_run_json)


def _parse_times(text):
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"cannot parse time list {text!r}") from exc


def _common_flags(sub):
    sub.add_argument("--config", help="TOML or JSON configuration file")
    sub.add_argument("--p", type=int, dest="p")
    sub.add_argument("--tau", type=float)
    sub.add_argument("--alpha", type=float)
    sub.add_argument("--out", dest="out_dir")
    sub.add_argument("--solver", choices=("direct", "iterative"))
    sub.add_argument("--time-quad-extra", type=int, dest="time_quad_extra")
    sub.add_argument("--no-figures", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="st-hdg",
        description="Space-time HDG solver for linear free-surface waves")
    subs = parser.add_subparsers(dest="command")

    run = subs.add_parser("run", help="march one problem and emit profiles")
    _common_flags(run)
    run.add_argument("--problem", choices=("harmonic", "wavemaker"))
    run.add_argument("--dt", type=float)
    run.add_argument("--T", type=float, dest="T")
    run.add_argument("--nx", type=int)
    run.add_argument("--ny", type=int)
    run.add_argument("--mesh-file", dest="mesh_file")
    run.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    run.add_argument("--profile-times", dest="profile_times",
                     help="comma-separated output times")
    run.add_argument("--points-per-edge", type=int, dest="points_per_edge")
    run.add_argument("--wavemaker-literal", action="store_true")

    conv = subs.add_parser("converge", help="run a convergence study")
    _common_flags(conv)
    conv.add_argument("--study", choices=("space", "time", "spacetime", "fixed-h"))
    conv.add_argument("--levels", type=int)

    proj = subs.add_parser("projection-rates",
                           help="measured approximation orders of the projection")
    _common_flags(proj)
    return parser


def _config_from_args(args) -> RunConfig:
    config = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {}
    for key in ("p", "tau", "alpha", "out_dir", "solver", "time_quad_extra",
                "problem", "dt", "T", "nx", "ny", "mesh_file",
                "checkpoint_every", "points_per_edge", "levels"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    if getattr(args, "study", None) is not None:
        overrides["study"] = args.study.replace("-", "_")
    if getattr(args, "profile_times", None):
        overrides["profile_times"] = _parse_times(args.profile_times)
    if getattr(args, "wavemaker_literal", False):
        overrides["wavemaker_literal"] = True
    if getattr(args, "no_figures", False):
        overrides["figures"] = False
    return config.apply(overrides)


def _cmd_run(args) -> int:
    config = _config_from_args(args)
    if config.problem == "wavemaker":
        if "dt" not in _given(args) and not args.config:
            config = config.apply({"dt": 0.2, "T": 53.4})
        if not config.profile_times:
            config = config.apply({"profile_times": (4.0, 25.8, 53.4)})
    config.validate()
    out = pathlib.Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mesh, problem, sols = run_simulation(config)
    times = config.profile_times or (sols[-1].t_end,)
    paths = surface_profile_csv(mesh, config.p, sols, times, out,
                                config.points_per_edge)
    if config.figures:
        from .plots import render_profile

        for t, path in zip(times, paths):
            x1, zeta = surface_profile(mesh, config.p, sols, t,
                                       config.points_per_edge)
            render_profile(x1, zeta, t, path.with_suffix(".png"))
    write_run_json(config, out, extra={
        "n_slabs": len(sols),
        "max_residual": max(s.residual for s in sols),
        "profiles": [str(p) for p in paths],
    })
    print(f"run complete: {len(sols)} slabs, outputs in {out}")
    return 0


def _given(args):
    return {k for k, v in vars(args).items() if v not in (None, False)}


def _cmd_converge(args) -> int:
    config = _config_from_args(args)
    config.validate()
    out = pathlib.Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = run_study(config)
    csv_path = out / "report.csv"
    report.to_csv(csv_path)
    if config.figures:
        from .plots import render_convergence

        render_convergence(report, out / "report.png")
    write_run_json(config, out, extra={"report": str(csv_path)})
    for row in report.rows:
        oq = "-" if row["order_q"] is None else f"{row['order_q']:.2f}"
        ol = "-" if row["order_lambda"] is None else f"{row['order_lambda']:.2f}"
        print(f"level {row['level']}: dofs={row['dofs']} dt={row['dt']:g} "
              f"err_q={row['err_q']:.3e} ({oq}) "
              f"err_lambda={row['err_lambda']:.3e} ({ol})")
    return 0


def _cmd_projection_rates(args) -> int:
    from .projection import measure_projection_rates

    config = _config_from_args(args)
    config.validate()
    out = pathlib.Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    wave = HarmonicWave.from_wavelength(1.0, 0.05)
    rows = measure_projection_rates(wave, config.p, tau=config.tau,
                                    alpha=config.alpha)
    path = out / "report.csv"
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema={SCHEMA_VERSION} projection-rates p={config.p}\n")
        writer = csv.writer(fh)
        writer.writerow(("study", "level", "h", "dt", "err_q", "order"))
        for row in rows:
            writer.writerow((
                row["study"], row["level"], f"{row['h']:.12e}",
                f"{row['dt']:.12g}", f"{row['err_q']:.12e}",
                "" if row["order"] is None else f"{row['order']:.4f}"))
    write_run_json(config, out, extra={"report": str(path)})
    for row in rows:
        order = "-" if row["order"] is None else f"{row['order']:.2f}"
        print(f"{row['study']}-study level {row['level']}: "
              f"err={row['err_q']:.3e} order={order}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 2
    handlers = {
        "run": _cmd_run,
        "converge": _cmd_converge,
        "projection-rates": _cmd_projection_rates,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, MeshError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
