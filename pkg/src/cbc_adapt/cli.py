"""Command-line entry point.

Subcommands:

* ``simulate``  -- run one scenario config, write trace.csv / metrics.json
* ``branch``    -- run a continuation config, write branch.csv / events.json
* ``cbc``       -- solve the reference zero-problem, write the refined
  reference JSON and the iteration history
* ``reproduce-figure`` -- regenerate the CSV behind any catalog figure

Every run writes a ``summary.json`` with a stable schema (``"schema": 1``)
and returns exit code 0 on success, 1 on solver failures and 2 on config
errors. Verbosity is controlled by the ``CBC_ADAPT_LOG`` environment
variable (DEBUG/INFO/WARNING/...).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import (ConfigError, build_controller, build_excitation,
                     build_plant, build_reference, build_scenario,
                     load_config, packaged_config)
from .continuation import (Branch, ConvergenceError, branch_to_csv, cbc_solve,
                           continue_branch, hb_solve, linear_response_guess,
                           signal_to_coeffs)
from .diagnostics import (estimation_error, invasiveness, metrics_report,
                          noninvasiveness_tolerance, pe_matrix_min_eig,
                          tracking_error_sup)
from .plant import Excitation
from .reference import builtin_reference, reference_to_json
from .simulator import SimulationDiverged, simulate, trace_to_csv

log = logging.getLogger("cbc_adapt")


def _write_csv(path, columns, data):
    data = np.atleast_2d(np.asarray(data, dtype=float))
    with open(path, "w") as fh:
        fh.write(",".join(columns) + "\n")
        for row in data:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def _write_summary(outdir: Path, payload: dict):
    payload = {"schema": 1, **payload}
    (outdir / "summary.json").write_text(json.dumps(payload, indent=2) + "\n")
    return payload


def _evaluate_thresholds(metrics, thresholds: dict):
    """Pass/fail of a scenario against its declared expectations."""
    expect = thresholds.get("expect")
    if expect == "noninvasive":
        tol = float(thresholds.get("tol_noninv", metrics.tol_noninv))
        track = float(thresholds.get("tracking_tol", np.inf))
        ok = metrics.sup_u <= tol and metrics.sup_e <= track
        reason = None if ok else (
            f"sup_u={metrics.sup_u:.3e} vs tol {tol:.3e}, "
            f"sup_e={metrics.sup_e:.3e} vs tol {track:.3e}")
        return ok, reason
    if expect == "invasive":
        floor = float(thresholds.get("floor_inv", metrics.floor_inv))
        track = float(thresholds.get("tracking_floor", 0.0))
        ok = metrics.sup_u >= floor and metrics.sup_e > track
        reason = None if ok else (
            f"sup_u={metrics.sup_u:.3e} vs floor {floor:.3e}, "
            f"sup_e={metrics.sup_e:.3e} vs floor {track:.3e}")
        return ok, reason
    return None, None


def run_simulate(config_path, outdir: Path, seed=None) -> dict:
    cfg = load_config(config_path)
    if cfg.get("kind", "simulate") != "simulate":
        raise ConfigError(f"{config_path} is not a simulation config")
    scenario, thresholds = build_scenario(cfg, seed_override=seed)
    log.info("simulating %s (%d steps)", scenario.label, scenario.n_steps)
    trace = simulate(scenario)
    outdir.mkdir(parents=True, exist_ok=True)
    trace_to_csv(trace, outdir / "trace.csv")
    artifacts = ["trace.csv"]
    metrics_payload = {}
    passed, reason = None, None
    if scenario.mode == "closed_loop":
        metrics = metrics_report(trace, scenario.plant, scenario.reference,
                                 scenario.excitation, scenario.params.S,
                                 scenario.params.k,
                                 tol_noninv=thresholds.get("tol_noninv"))
        (outdir / "metrics.json").write_text(metrics.to_json() + "\n")
        artifacts.append("metrics.json")
        metrics_payload = json.loads(metrics.to_json())
        passed, reason = _evaluate_thresholds(metrics, thresholds)
    return _write_summary(outdir, {
        "subcommand": "simulate", "label": scenario.label, "seed": seed,
        "artifacts": artifacts, "metrics": metrics_payload,
        "thresholds": thresholds, "passed": passed, "reason": reason,
    })


def _seed_orbit(plant, amplitude, phase, branch_table, segment):
    H = int(branch_table.get("harmonics", 7))
    tol = float(branch_table.get("tol", 1e-9))
    omega = float(segment.get("seed_omega",
                              branch_table.get("omega_min")))
    exc = Excitation(amplitude=amplitude, omega=omega, phase=phase)
    kind = segment.get("seed", "linear")
    if kind == "linear":
        guess = linear_response_guess(
            plant, exc, omega, x_eq=segment.get("seed_equilibrium"), H=H)
    elif kind.startswith("orbit:"):
        guess = builtin_reference(kind.split(":", 1)[1]).signal
    else:
        raise ConfigError(f"unknown branch seed {kind!r}")
    return hb_solve(plant, exc, guess, omega, H=H, tol=max(tol, 1e-12)), exc


def run_branch(config_path, outdir: Path, seed=None) -> dict:
    cfg = load_config(config_path)
    if cfg.get("kind") != "branch":
        raise ConfigError(f"{config_path} is not a branch config")
    plant = build_plant(cfg)
    excitation = build_excitation(cfg, plant)
    table = cfg.get("branch")
    if not table:
        raise ConfigError("missing [branch] table")
    segments = table.get("segments") or [{"seed": "linear"}]
    outdir.mkdir(parents=True, exist_ok=True)
    all_rows = []
    events = []
    totals = dict(orbits=0, LP=0, NS=0)
    for si, segment in enumerate(segments):
        seed_orbit, exc = _seed_orbit(plant, excitation.amplitude,
                                      excitation.phase, table, segment)
        log.info("continuing segment %d from omega=%.4g", si, seed_orbit.omega)
        br = continue_branch(
            plant, exc, (table["omega_min"], table["omega_max"]), seed_orbit,
            ds0=float(table.get("ds0", 0.05)),
            ds_max=float(table.get("ds_max", 0.2)),
            ds_min=float(table.get("ds_min", 1e-7)),
            max_steps=int(table.get("max_steps", 2000)),
            tol=float(table.get("tol", 1e-9)),
            steps_per_period=int(table.get("steps_per_period", 2000)),
            direction=segment.get("direction"))
        seg_csv = outdir / f"segment_{si}.csv"
        branch_to_csv(br, seg_csv)
        rows = seg_csv.read_text().splitlines()
        if si == 0:
            all_rows.append("segment," + rows[0])
        all_rows += [f"{si}," + r for r in rows[1:]]
        seg_csv.unlink()
        for ev in br.events:
            events.append({"segment": si, "kind": ev["kind"],
                           "omega": ev["omega"],
                           "bracket": list(ev["bracket"])})
            totals[ev["kind"]] += 1
        totals["orbits"] += len(br.orbits)
    (outdir / "branch.csv").write_text("\n".join(all_rows) + "\n")
    (outdir / "events.json").write_text(json.dumps(events, indent=2) + "\n")
    return _write_summary(outdir, {
        "subcommand": "branch", "label": cfg.get("label", "branch"),
        "seed": seed, "artifacts": ["branch.csv", "events.json"],
        "metrics": totals, "thresholds": {}, "passed": None, "reason": None,
    })


def run_cbc(config_path, outdir: Path, seed=None, n_jobs: int = 1) -> dict:
    cfg = load_config(config_path)
    if cfg.get("kind") != "cbc":
        raise ConfigError(f"{config_path} is not a cbc config")
    plant = build_plant(cfg)
    excitation = build_excitation(cfg, plant)
    reference = build_reference(cfg, plant, excitation, seed_override=seed)
    params, _, _, mask = build_controller(cfg, plant)
    table = cfg.get("cbc", {})
    outdir.mkdir(parents=True, exist_ok=True)
    history = []

    def note(it, c, norm):
        history.append((it, norm))
        log.info("cbc iteration %d: residual %.3e", it, norm)

    result = cbc_solve(
        plant, excitation, params, reference,
        tol=float(table.get("tol", 1e-6)),
        max_iter=int(table.get("max_iter", 15)),
        H=table.get("harmonics"),
        periods=int(table.get("periods", 100)),
        steps_per_period=int(table.get("steps_per_period", 2000)),
        samples_per_period=int(table.get("samples_per_period", 250)),
        method=table.get("method", "newton"),
        regressor_mask=mask, n_jobs=n_jobs, callback=note)
    (outdir / "reference.json").write_text(
        reference_to_json(result.reference) + "\n")
    _write_csv(outdir / "iterations.csv", ["iteration", "residual_norm"],
               [[i, r] for i, r in enumerate(result.history)])
    return _write_summary(outdir, {
        "subcommand": "cbc", "label": cfg.get("label", "cbc"), "seed": seed,
        "artifacts": ["reference.json", "iterations.csv"],
        "metrics": {"iterations": result.iterations,
                    "residual_norm": result.residual_norm},
        "thresholds": {"tol": float(table.get("tol", 1e-6))},
        "passed": result.converged, "reason": None,
    })


# -- figure catalog ------------------------------------------------------------

def _tracking_columns(scenario, trace):
    p = scenario.plant.dof_p
    n = scenario.plant.order_n
    xr = scenario.reference.evaluate_state(trace.t)
    pos = slice((n - 1) * p, n * p)
    cols = ["t"]
    data = [trace.t]
    for i in range(p):
        cols += [f"x_ref_{i}", f"x_{i}"]
        data += [xr[:, pos][:, i], trace.xi[:, pos][:, i]]
    return cols, np.column_stack(data)


def _input_columns(trace):
    p = trace.u_prime.shape[1]
    return (["t"] + [f"u_{i}" for i in range(p)],
            np.column_stack([trace.t, trace.u_prime]))


def _scenario_run(name, seed=None):
    cfg = load_config(packaged_config(name))
    scenario, thresholds = build_scenario(cfg, seed_override=seed)
    return scenario, thresholds, simulate(scenario)


def _fig_tracking(config_name, csv_name, outdir, seed):
    scenario, thresholds, trace = _scenario_run(config_name, seed)
    cols, data = _tracking_columns(scenario, trace)
    _write_csv(outdir / csv_name, cols, data)
    metrics = metrics_report(trace, scenario.plant, scenario.reference,
                             scenario.excitation, scenario.params.S,
                             scenario.params.k,
                             tol_noninv=thresholds.get("tol_noninv"))
    passed, reason = _evaluate_thresholds(metrics, thresholds)
    return [csv_name], json.loads(metrics.to_json()), thresholds, passed, reason


def _fig_input(config_name, csv_name, outdir, seed):
    scenario, thresholds, trace = _scenario_run(config_name, seed)
    cols, data = _input_columns(trace)
    _write_csv(outdir / csv_name, cols, data)
    metrics = metrics_report(trace, scenario.plant, scenario.reference,
                             scenario.excitation, scenario.params.S,
                             scenario.params.k,
                             tol_noninv=thresholds.get("tol_noninv"))
    passed, reason = _evaluate_thresholds(metrics, thresholds)
    return [csv_name], json.loads(metrics.to_json()), thresholds, passed, reason


def _fig_branch(config_name, csv_name, outdir, seed):
    summary = run_branch(packaged_config(config_name), outdir, seed)
    (outdir / "branch.csv").rename(outdir / csv_name)
    return ([csv_name, "events.json"], summary["metrics"], {}, None, None)


def _fig1b(outdir, seed):
    # desired (unstable) response, the open-loop run started on it, and the
    # uncontrolled run from distant initial states
    cfg = load_config(packaged_config("duffing_noninvasive"))
    scenario, _ = build_scenario(cfg)
    ref = scenario.reference
    op = load_config(packaged_config("duffing_openloop"))
    sc_far, _ = build_scenario(op)
    tr_far = simulate(sc_far)
    sc_orbit = type(sc_far)(
        plant=sc_far.plant, excitation=sc_far.excitation, params=None,
        reference=None, xi0=ref.evaluate_state(0.0), t_end=sc_far.t_end,
        dt=sc_far.dt, mode="open_loop", store_every=sc_far.store_every,
        label="duffing-openloop-orbit-ic")
    tr_orbit = simulate(sc_orbit)
    x_star = ref.evaluate_state(tr_far.t)[:, 1]
    _write_csv(outdir / "fig1b.csv",
               ["t", "x_star", "x_from_orbit_ic", "x_uncontrolled"],
               np.column_stack([tr_far.t, x_star, tr_orbit.xi[:, 1],
                               tr_far.xi[:, 1]]))
    dep = float(np.abs(tr_orbit.xi[:, 1] - x_star).max())
    return (["fig1b.csv"], {"orbit_ic_max_departure": dep}, {}, None, None)


def _fig7a(outdir, seed):
    scenario, thresholds, trace = _scenario_run("cantilever_tracking", seed)
    err = estimation_error(trace, scenario.plant.true_theta)
    _write_csv(outdir / "fig7a.csv", ["t", "theta_err_norm"],
               np.column_stack([trace.t, err]))
    return (["fig7a.csv"],
            {"theta_err_initial": float(err[0]),
             "theta_err_final": float(err[-1])},
            thresholds, None, None)


def _fig7b(outdir, seed):
    scenario, thresholds, trace = _scenario_run("cantilever_tracking", seed)
    T = scenario.excitation.period
    stride = max(1, int(round(T / trace.dt_grid)) // 4)
    ts, lam, tr_m = pe_matrix_min_eig(trace, scenario.plant, window=T,
                                      stride=stride)
    _write_csv(outdir / "fig7b.csv",
               ["t", "lambda_min", "trace_per_m"],
               np.column_stack([ts, lam, tr_m]))
    return (["fig7b.csv"],
            {"max_ratio": float((lam / tr_m).max())}, thresholds, None, None)


FIGURES = {
    "fig1a": lambda out, seed: _fig_branch("duffing_branch", "fig1a.csv", out, seed),
    "fig1b": _fig1b,
    "fig2a": lambda out, seed: _fig_tracking("duffing_noninvasive", "fig2a.csv", out, seed),
    "fig2b": lambda out, seed: _fig_input("duffing_noninvasive", "fig2b.csv", out, seed),
    "fig2c": lambda out, seed: _fig_tracking("duffing_perturbed", "fig2c.csv", out, seed),
    "fig2d": lambda out, seed: _fig_input("duffing_perturbed", "fig2d.csv", out, seed),
    "fig3": lambda out, seed: _fig_branch("cross_beam_branch", "fig3.csv", out, seed),
    "fig4a": lambda out, seed: _fig_tracking("cross_beam_tracking", "fig4a.csv", out, seed),
    "fig4b": lambda out, seed: _fig_input("cross_beam_tracking", "fig4b.csv", out, seed),
    "fig5": lambda out, seed: _fig_branch("cantilever_branch", "fig5.csv", out, seed),
    "fig6a": lambda out, seed: _fig_tracking("cantilever_tracking", "fig6a.csv", out, seed),
    "fig6b": lambda out, seed: _fig_input("cantilever_tracking", "fig6b.csv", out, seed),
    "fig7a": _fig7a,
    "fig7b": _fig7b,
}


def run_figure(figure: str, outdir: Path, seed=None) -> dict:
    if figure not in FIGURES:
        raise ConfigError(
            f"unknown figure {figure!r}; catalog: {sorted(FIGURES)}")
    outdir.mkdir(parents=True, exist_ok=True)
    artifacts, metrics, thresholds, passed, reason = FIGURES[figure](outdir, seed)
    return _write_summary(outdir, {
        "subcommand": "reproduce-figure", "figure": figure, "seed": seed,
        "artifacts": artifacts, "metrics": metrics, "thresholds": thresholds,
        "passed": passed, "reason": reason,
    })


def _run_figure_job(args):
    figure, outdir, seed = args
    return figure, run_figure(figure, Path(outdir), seed)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="cbc-adapt",
        description="Adaptive noninvasive tracking control and "
                    "control-based continuation studies.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config=True):
        if config:
            p.add_argument("--config", required=True,
                           help="scenario config file (TOML or JSON)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override perturbation seeds")

    add_common(sub.add_parser("simulate", help="run one scenario"))
    add_common(sub.add_parser("branch", help="run a continuation study"))
    pc = sub.add_parser("cbc", help="solve the reference zero-problem")
    add_common(pc)
    pc.add_argument("--parallel", type=int, default=1,
                    help="Jacobian columns evaluated in parallel")
    pf = sub.add_parser("reproduce-figure",
                        help="regenerate the data behind a catalog figure")
    add_common(pf, config=False)
    pf.add_argument("--figure", required=True,
                    help="figure id (fig1a, ..., fig7b) or 'all'")
    pf.add_argument("--parallel", type=int, default=1,
                    help="figures computed in parallel")

    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, os.environ.get("CBC_ADAPT_LOG", "WARNING").upper(),
                      logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s")

    outdir = Path(args.out)
    try:
        if args.command == "simulate":
            summary = run_simulate(Path(args.config), outdir, args.seed)
            if summary["passed"] is False:
                print(f"thresholds not met: {summary['reason']}",
                      file=sys.stderr)
                return 1
        elif args.command == "branch":
            run_branch(Path(args.config), outdir, args.seed)
        elif args.command == "cbc":
            run_cbc(Path(args.config), outdir, args.seed,
                    n_jobs=args.parallel)
        elif args.command == "reproduce-figure":
            figures = sorted(FIGURES) if args.figure == "all" else [args.figure]
            if args.parallel > 1 and len(figures) > 1:
                from concurrent.futures import ProcessPoolExecutor
                jobs = [(f, str(outdir / f), args.seed) for f in figures]
                with ProcessPoolExecutor(max_workers=args.parallel) as ex:
                    list(ex.map(_run_figure_job, jobs))
            else:
                for f in figures:
                    run_figure(f, outdir / f if len(figures) > 1 else outdir,
                               args.seed)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except (ConvergenceError, SimulationDiverged) as err:
        print(f"solver failure: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
