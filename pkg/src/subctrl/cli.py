"""Command-line entry point.

    subctrl <gap|steer|reach|kernel|track> --config <path> [--dry-run] [--plots] [--out <dir>]

Exit status is 0 on success, 2 for a certified negative (near-kernel or
near-singular operator, invariant sets found) and 1 for any error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import plots
from .config import RunConfig, load_config
from .control import (
    continuity_residual,
    energy_bound,
    steering_controls,
    steering_potential,
    time_grid,
    tracking_controls,
)
from .errors import NotControllableError, SubctrlError
from .expr import Expression
from .fields import builtin_fields, fields_from_expressions
from .grid import DensityField, build_grid, grid_csv
from .operators import assemble_form_operator, operator_dump
from .spectral import gap_floor, spectral_gap
from .transport import (
    density_distance,
    detect_invariant_sets,
    gaussian_target,
    integrate_ensemble,
    reach_experiment,
    sample_density,
)

log = logging.getLogger("subctrl")

SCHEMA_VERSION = 1
COMMANDS = ("gap", "steer", "reach", "kernel", "track")

EXIT_OK, EXIT_ERROR, EXIT_NEGATIVE = 0, 1, 2


class Run:
    """Objects built from a config, plus the report and sidecar bookkeeping."""

    def __init__(self, cfg: RunConfig, outdir: str, plots_on: bool):
        self.cfg = cfg
        self.outdir = outdir
        self.plots_on = plots_on
        self.sidecars = []
        g = cfg.grid
        self.grid = build_grid(g["box"], g["resolution"], g["mask"])
        f = cfg.fields
        if f["builtin"] is not None:
            self.fields = builtin_fields(f["builtin"])
        else:
            self.fields = fields_from_expressions(f["fields"], f["dimension"])
        if self.fields.dimension != self.grid.dimension:
            raise SubctrlError(
                f"fields live in dimension {self.fields.dimension}, grid in {self.grid.dimension}"
            )
        self._op = None

    @property
    def op(self):
        if self._op is None:
            weight = None
            if self.cfg.fields["weight"] is not None:
                expr = Expression(self.cfg.fields["weight"], self.grid.dimension)
                weight = np.broadcast_to(expr(self.grid.coords), (self.grid.size,)).copy()
            self._op = assemble_form_operator(self.grid, self.fields, weight)
            out = self.cfg.output
            if out["dump_grid"]:
                self.write("grid.csv", grid_csv(self.grid))
            if out["dump_operator"]:
                self.write("operator.txt", operator_dump(self._op))
        return self._op

    def floor(self):
        rel = self.cfg.solver["gap_floor"]
        return None if rel is None else gap_floor(self.op, rel)

    def density(self, text):
        return DensityField.from_expression(self.grid, text)

    def write(self, name, text):
        with open(os.path.join(self.outdir, name), "w") as fh:
            fh.write(text)
        self.sidecars.append(name)

    def heatmap(self, stem, v):
        if not self.plots_on:
            return
        try:
            self.sidecars.extend(plots.write_heatmaps(self.outdir, stem, self.grid, v))
        except Exception as exc:  # plots never change the exit status
            log.warning("could not write plot %s: %s", stem, exc)

    def series(self, name, header, rows):
        if not self.plots_on:
            return
        try:
            plots.write_series(os.path.join(self.outdir, name), header, rows)
            self.sidecars.append(name)
        except Exception as exc:
            log.warning("could not write series %s: %s", name, exc)


def _eigenvector_csv(G, v) -> str:
    lines = ["index," + ",".join(f"x{k + 1}" for k in range(G.dimension)) + ",v"]
    for a in range(G.size):
        coords = ",".join(repr(float(c)) for c in G.coords[a])
        lines.append(f"{a},{coords},{float(v[a])!r}")
    return "\n".join(lines) + "\n"


def _gap_report(run: Run):
    s = run.cfg.solver
    rep = spectral_gap(run.op, tol=s["eig_tol"], maxiter=s["maxiter"], seed=s["seed"],
                       floor=run.floor())
    return rep


# Subcommands ----------------------------------------------------------------


def cmd_gap(run: Run):
    rep = _gap_report(run)
    # Fix the eigenvector sign so dumps and plots are reproducible.
    v = rep.eigenvector * (1.0 if rep.eigenvector[np.argmax(np.abs(rep.eigenvector))] > 0 else -1.0)
    if run.cfg.output["dump_eigenvector"]:
        run.write("eigenvector.csv", _eigenvector_csv(run.grid, v))
    run.heatmap("eigenvector", v)
    status = EXIT_OK if rep.controllable else EXIT_NEGATIVE
    result = rep.to_dict()
    result.pop("grid")
    if not rep.controllable:
        result["message"] = "not certifiably controllable"
    return result, status


def _control_series(C):
    amp = np.max(np.abs(C.controls), axis=(1, 2))
    return [(k, float(C.times[k]), float(amp[k])) for k in range(len(C.times))]


def cmd_steer(run: Run):
    e, s = run.cfg.experiment, run.cfg.solver
    rho0, rho1 = run.density(e["rho0"]), run.density(e["rho1"])
    D = run.op
    times = time_grid(e["steps"])
    f = steering_potential(D, rho0, rho1, tol=s["tol"], c=e["c"], floor=run.floor())
    C = steering_controls(D, f, rho0, rho1, times, c=e["c"])
    residual = continuity_residual(C.densities, C, D)
    result = {"residual": residual, "c": e["c"], "K": e["steps"]}
    if np.any(f):
        lam = D.cache["gap"].gap
        bound = energy_bound(D, f, lam, rho0, rho1)
        result.update(bound)
        result["lambda"] = lam
    else:
        result.update({"effort_lhs": 0.0, "effort_rhs": 0.0, "ratio": 0.0, "holds": True})
    if e["particles"] > 0:
        ens = sample_density(rho0, e["particles"], seed=e["seed"])
        store = run.cfg.output["dump_trajectories"]
        out = integrate_ensemble(ens, C, run.fields, run.grid, substeps=e["substeps"], store=store)
        result["transport"] = {
            "particles": e["particles"],
            "distance_initial": density_distance(ens, rho1),
            "distance_terminal": density_distance(out, rho1),
            "exits": int(out.exits),
        }
        if store:
            run.write("trajectories.csv", out.trajectory_csv())
    if run.cfg.output["dump_controls"]:
        for k in range(len(times)):
            run.write(f"controls_{k:04d}.csv", C.csv(k))
    run.heatmap("rho0", rho0.values)
    run.heatmap("rho1", rho1.values)
    run.heatmap("potential", f)
    run.series("control_amplitude.csv", ("k", "t", "max_abs_u"), _control_series(C))
    status = EXIT_OK if residual <= e["residual_threshold"] else EXIT_ERROR
    return result, status


def cmd_reach(run: Run):
    e, s = run.cfg.experiment, run.cfg.solver
    if e["y"] is None:
        raise SubctrlError("[experiment] y is required for reach")
    rep = reach_experiment(
        run.fields, run.grid, run.op, e["y"], e["R"], alpha=e["alpha"], tol=s["tol"],
        steps=e["steps"], substeps=e["substeps"], c=e["c"], floor=run.floor(),
        reverse=e["reverse"],
    )
    if run.plots_on:
        run.heatmap("target", gaussian_target(run.grid, e["y"], e["alpha"], e["c"]).values)
    result = rep.to_dict()
    result["threshold"] = e["reach_threshold"]
    status = EXIT_OK if rep.fraction >= e["reach_threshold"] else EXIT_ERROR
    return result, status


def cmd_kernel(run: Run):
    s, e = run.cfg.solver, run.cfg.experiment
    found = detect_invariant_sets(run.op, run.grid, run.fields, tol=s["kernel_tol"],
                                  kmax=s["kmax"], seed=s["seed"], samples=e["samples"])
    sets = []
    for j, (xi, defect) in enumerate(found):
        sets.append({
            "nodes": int(xi.sum()),
            "mass": float(run.grid.weights @ xi),
            "defect": float(defect),
        })
        run.heatmap(f"invariant_set_{j + 1}", xi)
    if found and run.cfg.output["dump_eigenvector"]:
        cols = ",".join(f"set_{j + 1}" for j in range(len(found)))
        lines = [f"index,{cols}"]
        for a in range(run.grid.size):
            lines.append(f"{a}," + ",".join(str(int(xi[a])) for xi, _ in found))
        run.write("invariant_sets.csv", "\n".join(lines) + "\n")
    result = {"invariant_sets": sets, "count": len(sets)}
    return result, (EXIT_NEGATIVE if sets else EXIT_OK)


def cmd_track(run: Run):
    e, s = run.cfg.experiment, run.cfg.solver
    if e["path"] is None:
        raise SubctrlError("[experiment] path is required for track")
    times = np.array([item["t"] for item in e["path"]])
    path = [run.density(item["rho"]) for item in e["path"]]
    D = run.op
    C = tracking_controls(D, path, times, c=e["c"], tol=s["tol"], floor=run.floor())
    residual = continuity_residual(path, C, D)
    result = {
        "residual": residual,
        "c": e["c"],
        "K": len(times) - 1,
        "max_abs_control": float(np.max(np.abs(C.controls))),
    }
    if run.cfg.output["dump_controls"]:
        for k in range(len(times)):
            run.write(f"controls_{k:04d}.csv", C.csv(k))
    run.heatmap("rho_start", path[0].values)
    run.heatmap("rho_end", path[-1].values)
    run.series("control_amplitude.csv", ("k", "t", "max_abs_u"), _control_series(C))
    status = EXIT_OK if residual <= e["residual_threshold"] else EXIT_ERROR
    return result, status


HANDLERS = {"gap": cmd_gap, "steer": cmd_steer, "reach": cmd_reach, "kernel": cmd_kernel,
            "track": cmd_track}


# Driver ---------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj) if np.isfinite(obj) else str(float(obj))
    return obj


def render_report(command, cfg, result, status, sidecars) -> str:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "status": status,
        "config": cfg.as_dict(),
        "result": result,
        "sidecars": sorted(sidecars),
    }
    return json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="subctrl",
        description="Spectral controllability tests and density steering for driftless systems.",
    )
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="TOML run configuration")
    p.add_argument("--dry-run", action="store_true", help="validate the config and exit")
    p.add_argument("--plots", action="store_true", help="write PGM heatmaps and series CSVs")
    p.add_argument("--out", help="output directory (overrides [output] dir)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run_command(command, cfg: RunConfig, outdir, plots_on=False, dry_run=False):
    """Execute one subcommand; returns ``(status, report text or None)``."""
    if dry_run:
        Run(cfg, outdir, False)
        return EXIT_OK, None
    os.makedirs(outdir, exist_ok=True)
    run = Run(cfg, outdir, plots_on)
    try:
        result, status = HANDLERS[command](run)
    except NotControllableError as exc:
        result = {"message": str(exc), "gap": exc.gap, "gap_floor": exc.floor}
        status = EXIT_NEGATIVE
    text = render_report(command, cfg, result, status, run.sidecars)
    with open(os.path.join(outdir, f"{command}_report.json"), "w") as fh:
        fh.write(text)
    return status, text


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors; 2 is reserved here.
        return EXIT_OK if exc.code == 0 else EXIT_ERROR
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        outdir = args.out or cfg.output["dir"]
        status, text = run_command(args.command, cfg, outdir, args.plots, args.dry_run)
    except (SubctrlError, ValueError, ArithmeticError, OSError) as exc:
        print(f"subctrl {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    if text is None:
        print(f"config {args.config} is valid")
    else:
        print(f"subctrl {args.command}: status {status}, report in "
              f"{os.path.join(outdir, args.command + '_report.json')}")
    return status


if __name__ == "__main__":
    sys.exit(main())
