"""Command-line front end.

Commands: solve, stability, dynamics, abm, sweep. Every command writes a
run manifest next to its outputs; CSV bodies are byte-identical across
reruns with identical inputs (only the manifest carries wall time).
Exit codes: 0 success, 1 input error, 2 numerical non-convergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import pathlib
import sys
import time
from dataclasses import replace

import numpy as np

from . import __version__, abm, dynamics, fieldcore, stability
from .errors import NonConvergenceError, SectorFieldError
from .scenario import StructuralParams, load_scenario, save_scenario

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NONCONVERGED = 2

THREADS_ENV = "SECTORFIELD_THREADS"


def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _scenario_hash(path) -> str:
    return hashlib.sha256(pathlib.Path(path).read_bytes()).hexdigest()


def _write_manifest(outdir: pathlib.Path, command: str, scenario_path,
                    started: float) -> None:
    manifest = {
        "command": command,
        "scenario_path": str(scenario_path),
        "output_dir": str(outdir),
        "tool_version": __version__,
        "scenario_hash": _scenario_hash(scenario_path),
        "wall_time_s": time.monotonic() - started,
    }
    (outdir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _csv_or_json(outdir: pathlib.Path, stem: str, csv_text: str, fmt: str):
    if fmt == "json":
        lines = csv_text.strip().splitlines()
        header = lines[0].split(",")
        rows = [dict(zip(header, line.split(","))) for line in lines[1:]]
        (outdir / f"{stem}.json").write_text(
            json.dumps(rows, indent=2, sort_keys=True) + "\n")
    else:
        (outdir / f"{stem}.csv").write_text(csv_text)


_PLOT_TEMPLATE = """\
# Generated plotting script; run with any Python that has matplotlib.
import csv
import matplotlib.pyplot as plt

rows = list(csv.DictReader(open({csv!r})))
x = [float(r["x"]) for r in rows]
for column in {columns!r}:
    plt.plot(x, [float(r[column]) for r in rows], label=column)
plt.xlabel("sector")
plt.legend()
plt.savefig({png!r}, dpi=150)
"""


def _emit_plot(outdir: pathlib.Path, csv_name: str, columns) -> None:
    (outdir / "plot.py").write_text(_PLOT_TEMPLATE.format(
        csv=csv_name, columns=list(columns), png=csv_name.replace(".csv", ".png")))


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--scenario", required=True, help="scenario file path")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--format", choices=("csv", "json"), default="csv")
    parser.add_argument("--threads", type=int, default=None,
                        help=f"worker pool size (default ${THREADS_ENV} or 1)")


def _prepare(args):
    outdir = pathlib.Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    scenario = load_scenario(args.scenario)
    threads = args.threads if args.threads else _default_threads()
    return scenario, outdir, threads


def _solve(scenario, max_iter=800):
    return fieldcore.solve_collective_state(scenario, max_iter=max_iter)


def cmd_solve(args) -> int:
    started = time.monotonic()
    scenario, outdir, _ = _prepare(args)
    try:
        sol = _solve(scenario, max_iter=args.max_iter)
    except NonConvergenceError as exc:
        print(f"solver did not converge: {exc} (residual "
              f"{exc.residual})", file=sys.stderr)
        _write_manifest(outdir, "solve", args.scenario, started)
        return EXIT_NONCONVERGED
    _csv_or_json(outdir, "solution", fieldcore.solution_csv_text(sol), args.format)
    (outdir / "solution.json").write_text(
        json.dumps(fieldcore.solution_sidecar(sol), indent=2, sort_keys=True)
        + "\n")
    if args.emit_plot:
        _emit_plot(outdir, "solution.csv", ("k_x", "psi2", "nhat"))
    _write_manifest(outdir, "solve", args.scenario, started)
    return EXIT_OK


def cmd_stability(args) -> int:
    started = time.monotonic()
    scenario, outdir, _ = _prepare(args)
    try:
        sol = _solve(scenario)
    except NonConvergenceError as exc:
        print(f"solver did not converge: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    params = tuple(args.sensitivities.split(",")) if args.sensitivities else ()
    report = stability.classify(scenario, sol, sensitivity_params=params)
    _csv_or_json(outdir, "stability",
                 stability.report_csv_text(scenario, report), args.format)
    _write_manifest(outdir, "stability", args.scenario, started)
    return EXIT_OK


def _parse_g_range(spec_text: str) -> np.ndarray:
    try:
        lo_s, hi_s, n_s = spec_text.split(":")
        lo, hi, n = float(lo_s), float(hi_s), int(n_s)
    except ValueError as exc:
        raise SectorFieldError(f"malformed --g-range {spec_text!r}") from exc
    if n < 1:
        raise SectorFieldError("--g-range needs at least one point")
    if lo == hi:
        return np.full(n, lo)
    if lo > 0 and hi / lo >= 100.0:
        return np.logspace(np.log10(lo), np.log10(hi), n)
    return np.linspace(lo, hi, n)


def cmd_dynamics(args) -> int:
    started = time.monotonic()
    scenario, outdir, _ = _prepare(args)
    g_range = _parse_g_range(args.g_range) if args.g_range else None
    try:
        sol = _solve(scenario)
    except NonConvergenceError as exc:
        print(f"solver did not converge: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    report = dynamics.regime_analysis(scenario, sol, g_range=g_range)
    _csv_or_json(outdir, "dynamics",
                 dynamics.report_csv_text(scenario, report), args.format)
    (outdir / "dynamics_summary.json").write_text(
        dynamics.report_summary_text(scenario, report))
    _write_manifest(outdir, "dynamics", args.scenario, started)
    return EXIT_OK


def cmd_abm(args) -> int:
    started = time.monotonic()
    scenario, outdir, threads = _prepare(args)
    try:
        sol = _solve(scenario)
    except NonConvergenceError as exc:
        print(f"solver did not converge: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    seeds = list(range(args.seeds))
    trajectory = None
    traj_path = outdir / "trajectory.csv"
    if args.trajectory:
        trajectory = traj_path.open("w")
        trajectory.write("t,x,firm_count,mean_k\n")
    try:
        report = abm.run_and_compare(scenario, sol, steps=args.steps,
                                     burn_in=args.burn_in, seeds=seeds,
                                     dt=args.dt, threads=threads,
                                     trajectory=trajectory)
    finally:
        if trajectory is not None:
            trajectory.close()
    _csv_or_json(outdir, "abm", abm.comparison_csv_text(scenario, report),
                 args.format)
    _write_manifest(outdir, "abm", args.scenario, started)
    return EXIT_OK


def cmd_sweep(args) -> int:
    started = time.monotonic()
    scenario, outdir, _ = _prepare(args)
    if args.param not in {f.name for f in
                          StructuralParams.__dataclass_fields__.values()}:
        print(f"unknown parameter {args.param!r}", file=sys.stderr)
        return EXIT_INPUT
    raw = [tok for tok in args.values.split(",") if tok.strip()]
    if not raw:
        print("empty value list", file=sys.stderr)
        return EXIT_INPUT
    try:
        values = [float(tok) for tok in raw]
    except ValueError:
        print(f"malformed --values {args.values!r}", file=sys.stderr)
        return EXIT_INPUT

    lines = ["param,value,x,k_x,psi2,nhat,f,p,converged"]
    warm = None
    nodes = scenario.grid.nodes()
    for value in values:
        sc = scenario.with_params(**{args.param: value})
        try:
            sol = fieldcore.solve_collective_state(
                sc, seeds=warm, multi_start=warm is None)
            warm = sol.k_x
            for i in range(sc.grid.n_sectors):
                lines.append(",".join([
                    args.param, format(value, ".17g"),
                    format(nodes[i], ".17g"), format(sol.k_x[i], ".17g"),
                    format(sol.psi2[i], ".17g"), format(sol.nhat[i], ".17g"),
                    format(sol.f_x[i], ".17g"), format(sol.p_x[i], ".17g"),
                    "1"]))
        except (NonConvergenceError, SectorFieldError):
            for i in range(sc.grid.n_sectors):
                lines.append(",".join([
                    args.param, format(value, ".17g"),
                    format(nodes[i], ".17g"), "nan", "nan", "nan", "nan",
                    "nan", "0"]))
    _csv_or_json(outdir, "sweep", "\n".join(lines) + "\n", args.format)
    _write_manifest(outdir, "sweep", args.scenario, started)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sectorfield",
        description="collective states of the sector economy")
    sub = parser.add_subparsers(dest="command", required=True)

    p_solve = sub.add_parser("solve", help="solve the collective state")
    _add_common(p_solve)
    p_solve.add_argument("--max-iter", type=int, default=800)
    p_solve.add_argument("--emit-plot", action="store_true")
    p_solve.set_defaults(func=cmd_solve)

    p_stab = sub.add_parser("stability", help="per-sector stability report")
    _add_common(p_stab)
    p_stab.add_argument("--sensitivities", default="",
                        help="comma list of sensitivity parameters")
    p_stab.set_defaults(func=cmd_stability)

    p_dyn = sub.add_parser("dynamics", help="dispersion and regime report")
    _add_common(p_dyn)
    p_dyn.add_argument("--g-range", default="",
                       help="wavenumbers as lo:hi:n (default log-spaced)")
    p_dyn.set_defaults(func=cmd_dynamics)

    p_abm = sub.add_parser("abm", help="agent-based cross-validation")
    _add_common(p_abm)
    p_abm.add_argument("--seeds", type=int, default=5)
    p_abm.add_argument("--steps", type=int, default=500)
    p_abm.add_argument("--burn-in", type=int, default=100)
    p_abm.add_argument("--dt", type=float, default=0.05)
    p_abm.add_argument("--trajectory", action="store_true")
    p_abm.set_defaults(func=cmd_abm)

    p_sweep = sub.add_parser("sweep", help="parameter sweep of solves")
    _add_common(p_sweep)
    p_sweep.add_argument("--param", required=True)
    p_sweep.add_argument("--values", required=True)
    p_sweep.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NonConvergenceError as exc:
        print(f"non-convergence: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except (SectorFieldError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
