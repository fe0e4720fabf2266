"""Command-line front end: plan, replan, validate, export."""

from __future__ import annotations

import argparse
import logging
import math
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import io
from .optimizer import (EventError, PlanResult, ReplanResult, mean_speed_gap, optimize_plan,
                        optimize_plan_energy, pending_targets, replan)
from .primitives import HorizonOverflowError, build_initial_guess
from .routing import RoutingInfeasible, build_graph, check_routing_feasibility, solve_routing
from .scenario import (PlannerConfig, Scenario, ScenarioValidationError, SchemaError,
                       load_scenario_file)
from .stl import build_mission_formula, robustness_signal, And, PairDist, safety_formula
from .validate import GridMismatch, validate_bundle

log = logging.getLogger("diverterplan")

EXIT_FAIL = 1
EXIT_INPUT = 2
EXIT_STAGE = 3


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: Exception):
        self.stage = stage
        super().__init__(f"{stage}: {exc}")


def _shared(p: argparse.ArgumentParser):
    p.add_argument("--scenario", type=Path, help="scenario document (YAML)")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None, help="smoothing sharpness")
    p.add_argument("--energy", action="store_true", help="add the forward-speed energy term")
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--vstar", type=float, default=None)
    p.add_argument("--max-iters", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="diverterplan", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="route, seed and optimize a mission")
    _shared(p)

    p = sub.add_parser("replan", help="plan a backup UAV after a failure")
    _shared(p)
    p.add_argument("--plan", type=Path, required=True, help="directory of the original plan")
    p.add_argument("--event", type=Path, required=True, help="failure event document")

    p = sub.add_parser("validate", help="check trajectory files against a scenario")
    _shared(p)
    p.add_argument("--plan", type=Path, required=True, help="directory holding trajectory_*.csv")
    p.add_argument("--event", type=Path, help="validate a replanned window for this event")
    p.add_argument("--original", type=Path, help="original plan directory (with --event)")

    p = sub.add_parser("export", help="write plot-ready per-UAV series")
    _shared(p)
    p.add_argument("--plan", type=Path, required=True)
    p.add_argument("--format", choices=("csv", "tsv"), default="csv")
    return ap


def config_from_args(cfg: PlannerConfig, args) -> PlannerConfig:
    changes = {}
    for attr, val in (("seed", args.seed), ("lam", args.lam), ("eta", args.eta),
                      ("v_star", args.vstar), ("max_iters", args.max_iters)):
        if val is not None:
            changes[attr] = val
    return cfg.with_(**changes) if changes else cfg


def _load(args, plan_dir: Path | None = None) -> tuple[Scenario, PlannerConfig]:
    path = args.scenario
    if path is None and plan_dir is not None and (plan_dir / "plan.yaml").exists():
        path = Path(io.read_yaml(plan_dir / "plan.yaml")["scenario"])
    if path is None:
        raise SchemaError("--scenario is required")
    s, cfg = load_scenario_file(path)
    return s, config_from_args(cfg, args)


def _names(graph, route):
    return [graph.names[v] if graph.names else str(v) for v in route]


# ------------------------------------------------------------ plan


def run_plan(s: Scenario, cfg: PlannerConfig, energy: bool = False):
    """Full pipeline; returns (graph, routing, guess, result)."""
    try:
        graph = build_graph(s)
        routing = solve_routing(graph, cfg)
        diags = check_routing_feasibility(routing, graph, cfg)
        if diags:
            raise RoutingInfeasible("internal", "; ".join(diags))
    except RoutingInfeasible as exc:
        raise StageError("routing", exc) from exc
    try:
        guess = build_initial_guess(routing, s, cfg, graph, v_xy=cfg.v_star if energy else None)
    except HorizonOverflowError as exc:
        raise StageError("initial-guess", exc) from exc
    phi = build_mission_formula(s, cfg)
    try:
        if energy:
            res = optimize_plan_energy(guess, phi, cfg, scenario=s)
        else:
            res = optimize_plan(guess, phi, cfg, scenario=s)
    except (ValueError, RuntimeError) as exc:
        raise StageError("optimize", exc) from exc
    return graph, routing, guess, res


def cmd_plan(args) -> int:
    s, cfg = _load(args)
    out = args.out or Path("plan_out")
    out.mkdir(parents=True, exist_ok=True)
    graph, routing, guess, res = run_plan(s, cfg, args.energy)
    report = res.report
    if args.energy:
        report.add("mean_speed_gap", mean_speed_gap(res.bundle, cfg.v_star), None, f"v_star={cfg.v_star}")
        report.add("mean_speed_gap_guess", mean_speed_gap(guess, cfg.v_star), None)
        if res.infeasible_tradeoff:
            report.add("energy_tradeoff", "infeasible", False)
    io.write_trajectories(res.bundle, out)
    io.write_trajectories(guess, out / "initial_guess")
    io.write_yaml(out / "routing.yaml", {
        "objective": float(routing.objective),
        "proven_optimal": bool(routing.proven_optimal),
        "nodes_explored": int(routing.nodes_explored),
        "routes": {u: {"stops": _names(graph, r), "distance": float(d)}
                   for u, r, d in zip(graph.uav_ids, routing.routes, routing.distances)},
    })
    io.write_yaml(out / "plan.yaml", {
        "scenario": str(Path(args.scenario).resolve()),
        "seed": cfg.seed, "lambda": cfg.lam, "energy": bool(args.energy), "eta": cfg.eta,
        "v_star": cfg.v_star, "max_iters": cfg.max_iters, "N": cfg.N, "T_s": cfg.T_s,
        "rho_exact": float(res.rho_exact), "rho_smooth": float(res.rho_smooth),
        "iterations": int(res.iterations), "wall_time": float(res.wall_time),
        "uavs": list(res.bundle.ids),
    })
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    sys.stdout.write(report.to_text())
    return 0 if report.passed else EXIT_FAIL


# ------------------------------------------------------------ replan


def cmd_replan(args) -> int:
    s, cfg = _load(args, args.plan)
    event = io.load_event(args.event)
    meta = io.read_yaml(args.plan / "plan.yaml") if (args.plan / "plan.yaml").exists() else {}
    bundle = io.read_bundle(args.plan, meta.get("uavs"))
    original = PlanResult(bundle, float(meta.get("rho_exact", math.nan)), float(meta.get("rho_smooth", math.nan)), 0, 0.0)
    try:
        rr: ReplanResult = replan(original, event, s, cfg)
    except (HorizonOverflowError, RoutingInfeasible) as exc:
        raise StageError("replan", exc) from exc
    out = args.out or Path("replan_out")
    out.mkdir(parents=True, exist_ok=True)
    for tr in rr.plan.bundle.trajectories:
        if tr.uav_id != event.backup.id:
            shutil.copyfile(io.traj_path(args.plan, tr.uav_id), io.traj_path(out, tr.uav_id))
    io.write_trajectories(rr.plan.bundle, out, only=[event.backup.id])
    names = lambda ts: [s.targets[t].name or f"T{t + 1}" for t in ts]
    io.write_yaml(out / "replan.yaml", {
        "scenario": str(Path(args.scenario).resolve()) if args.scenario else meta.get("scenario"),
        "failed_uav": event.failed_uav, "t_fail": event.t_fail, "backup": event.backup.id,
        "window_start": rr.k_start * cfg.T_s, "pending": names(rr.pending), "completed": names(rr.completed),
        "rho_exact": float(rr.plan.rho_exact), "iterations": int(rr.plan.iterations),
        "uavs": list(rr.plan.bundle.ids),
    })
    text = rr.plan.report.to_text()
    (out / "report.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0 if rr.plan.report.passed else EXIT_FAIL


# ------------------------------------------------------------ validate


def validate_replan_dir(plan_dir: Path, original_dir: Path, event, s: Scenario, cfg: PlannerConfig):
    from .optimizer import check_event
    orig = io.read_bundle(original_dir)
    check_event(event, s, cfg, orig.ids)
    bundle = io.read_bundle(plan_dir)
    k_fail = int(round(event.t_fail / cfg.T_s))
    k_s = int(round((event.t_fail + cfg.t_rep) / cfg.T_s))
    pending, _ = pending_targets(orig[event.failed_uav].p, s, cfg, k_fail)
    s_ext = Scenario(s.workspace, s.obstacles, s.targets, s.refills, tuple(s.fleet) + (event.backup,))
    payload = event.backup.capacity if event.payload is None else event.payload
    return validate_bundle(bundle, s_ext, cfg, start=k_s, targets=pending,
                           loads={event.backup.id: payload})


def cmd_validate(args) -> int:
    s, cfg = _load(args, args.plan)
    if args.event is not None:
        if args.original is None:
            raise SchemaError("--event needs --original")
        rep = validate_replan_dir(args.plan, args.original, io.load_event(args.event), s, cfg)
    else:
        rep = validate_bundle(io.read_bundle(args.plan), s, cfg)
    text = rep.to_text()
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "report.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0 if rep.passed else EXIT_FAIL


# ------------------------------------------------------------ export


def heading(v: np.ndarray, rest: float = 1e-6) -> np.ndarray:
    """atan2(v2, v1), holding the last defined value while at rest (0 before any motion)."""
    psi = np.arctan2(v[:, 1], v[:, 0])
    moving = np.hypot(v[:, 0], v[:, 1]) > rest
    out = np.zeros(len(psi))
    last = 0.0
    for k in range(len(psi)):
        if moving[k]:
            last = psi[k]
        out[k] = last
    return out


def export_series(bundle, s: Scenario, cfg: PlannerConfig):
    """Per-UAV (header, rows) tables."""
    from .validate import capacity_events
    caps = {u.id: u.capacity for u in s.fleet}
    P = bundle.positions
    tables = {}
    for i, tr in enumerate(bundle.trajectories):
        u = tr.uav_id
        others = [o for o in bundle.ids if o != u]
        cols = ["t", "p1", "p2", "p3", "v1", "v2", "v3", "a1", "a2", "a3"]
        cols += [f"dist_{o}" for o in others]
        cols += ["v_for", "heading", "capacity", "rho_safety"]
        a = np.vstack([tr.a, np.zeros((1, 3))])
        dists = [np.linalg.norm(tr.p - bundle[o].p, axis=1) for o in others]
        vf = np.hypot(tr.v[:, 0], tr.v[:, 1])
        cap = caps.get(u, 0)
        trace, _ = capacity_events(tr.p, s, cfg, cap, cap)
        own = safety_formula(s, cfg, [u])
        parts = [own] + [PairDist(u, o, cfg.Gamma) for o in others]
        phi = parts[0] if len(parts) == 1 else And(*parts)
        rho = robustness_signal(phi, (P, bundle.ids))
        data = np.column_stack([bundle.T_s * np.arange(tr.N + 1), tr.p, tr.v, a, *dists, vf,
                                heading(tr.v), trace, rho])
        tables[u] = (cols, data)
    return tables


def cmd_export(args) -> int:
    s, cfg = _load(args, args.plan)
    bundle = io.read_bundle(args.plan)
    out = args.out or args.plan / "export"
    out.mkdir(parents=True, exist_ok=True)
    sep = "," if args.format == "csv" else "\t"
    for u, (cols, data) in export_series(bundle, s, cfg).items():
        path = out / f"series_{u}.{args.format}"
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(sep.join(cols) + "\n")
            for row in data:
                fh.write(sep.join(repr(float(x)) for x in row) + "\n")
        print(path)
    return 0


COMMANDS = {"plan": cmd_plan, "replan": cmd_replan, "validate": cmd_validate, "export": cmd_export}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except StageError as exc:
        print(f"error in stage {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (SchemaError, ScenarioValidationError, GridMismatch, EventError,
            io.TrajectoryFormatError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
