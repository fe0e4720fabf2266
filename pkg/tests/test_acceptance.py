"""End-to-end acceptance suite; each test reports one pass/fail line."""

from __future__ import annotations

import math
import time

import numpy as np
import pytest

from conftest import cli_plan, load, scenario_path
from diverterplan import cli, io
from diverterplan.optimizer import integrate_dynamics, mean_speed_gap, optimal_forward_speed
from diverterplan.primitives import min_time_rest_to_rest, sample_primitive
from diverterplan.routing import RoutingGraph, RoutingInfeasible, brute_force_routing, solve_routing
from diverterplan.scenario import Box3, PlannerConfig, Scenario, UavSpec
from diverterplan.stl import build_mission_formula, robustness_smooth, smooth_gradient, smooth_max, smooth_min
from diverterplan.validate import parse_report

def _bounds_ok(r, cfg):
    return (all(float(r[f"max_abs_v{j}"]) <= cfg.v_max + 1e-9 for j in (1, 2, 3))
            and all(float(r[f"max_abs_a{j}"]) <= cfg.a_max + 1e-9 for j in (1, 2, 3)))


def _mission_ok(r, s, cfg):
    dwells = [float(v) for k, v in r.items() if k.startswith("dwell[")]
    return (float(r["min_pair_distance"]) > cfg.Gamma and _bounds_ok(r, cfg)
            and len(dwells) == len(s.targets) and min(dwells) >= cfg.t_ins - 1e-9
            and all(int(r[f"capacity_min[{u.id}]"]) >= 0 for u in s.fleet)
            and all(r[f"terminal_refill[{u.id}]"] != "none" for u in s.fleet)
            and float(r["rho_exact"]) > 0 and r["result"] == "PASS")


def test_criterion_01_scenario_a(acceptance_line):
    code, out, wall = cli_plan("scenario_A")
    s, cfg = load("scenario_A")
    r = parse_report((out / "report.txt").read_text())
    assert cfg.N == 3100 and (cfg.Gamma, cfg.v_max, cfg.a_max, cfg.t_ins) == (3.0, 3.1, 3.1, 5.0)
    assert [u.capacity for u in s.fleet] == [2, 3]
    ok = code == 0 and _mission_ok(r, s, cfg) and wall <= 30 * 60
    acceptance_line(1, ok, f"exit={code} rho={r['rho_exact']} dmin={r['min_pair_distance']} wall={wall:.0f}s")
    assert ok, (out / "report.txt").read_text()


def test_criterion_02_four_uav(acceptance_line):
    code, out, wall = cli_plan("scenario_4uav")
    s, cfg = load("scenario_4uav")
    assert [u.capacity for u in s.fleet] == [2, 3, 4, 1]
    assert (len(s.targets), len(s.refills), len(s.fleet)) == (11, 4, 4)
    r = parse_report((out / "report.txt").read_text())
    ok = code == 0 and _mission_ok(r, s, cfg) and wall <= 60 * 60
    acceptance_line(2, ok, f"exit={code} rho={r['rho_exact']} dmin={r['min_pair_distance']} wall={wall:.0f}s")
    assert ok, (out / "report.txt").read_text()


def _random_instance(seed):
    rng = np.random.default_rng(seed)
    D = int(rng.integers(1, 3))
    T = int(rng.integers(D, 7))
    R = int(rng.integers(1, 3))
    caps = rng.integers(1, 4, size=D)
    g = RoutingGraph.from_points(rng.uniform(0, 30, (T, 3)), rng.uniform(0, 30, (R, 3)),
                                 rng.uniform(0, 30, (D, 3)), caps)
    return g, PlannerConfig(sigma_bar=float(rng.choice([5.0, 10.0, 1e6])))


def test_criterion_03_routing_oracle(acceptance_line):
    worst, solved, seed = 0.0, 0, 1000
    while solved < 20:
        g, cfg = _random_instance(seed)
        seed += 1
        try:
            b = brute_force_routing(g, cfg).objective
        except RoutingInfeasible:
            with pytest.raises(RoutingInfeasible):
                solve_routing(g, cfg)
            continue
        a = solve_routing(g, cfg).objective
        worst = max(worst, abs(a - b))
        solved += 1
    ok = worst <= 1e-9
    acceptance_line(3, ok, f"20 feasible instances (seeds 1000..{seed - 1}), max |B&B - brute force| = {worst:.2e}")
    assert ok


def test_criterion_04_smooth_bounds(acceptance_line):
    rng = np.random.default_rng(4)
    worst = 0.0
    ok = True
    for _ in range(1000):
        beta = int(rng.integers(1, 65))
        x = rng.uniform(-10, 10, beta)
        errs = []
        for lam in (1.0, 10.0, 100.0):
            gap = x.min() - smooth_min(x, lam)
            ok &= -1e-12 <= gap <= math.log(beta) / lam + 1e-12
            ok &= smooth_max(x, lam) <= x.max() + 1e-12
            errs.append(gap)
            worst = max(worst, gap - math.log(beta) / lam)
        ok &= all(e1 >= e2 - 1e-12 for e1, e2 in zip(errs, errs[1:]))
    acceptance_line(4, ok, f"1000 sets x 3 lambdas, max bound excess {worst:.2e}")
    assert ok


def _gradient_instance(seed):
    rng = np.random.default_rng(seed)
    N = 50
    cfg = PlannerConfig(t_N=N * 0.05, t_ins=0.5, t_rs=0.6, T_s=0.05)
    s = Scenario(Box3([0, 0, 0], [10, 10, 10]), [Box3([4, 4, 0], [6, 6, 10])],
                 [Box3([1, 1, 1], [3, 3, 3]), Box3([7, 7, 7], [9, 9, 9])], [Box3([0, 4, 0], [2, 6, 2])],
                 [UavSpec("A", 2, [1, 1, 1]), UavSpec("B", 2, [8, 8, 8])])
    A = rng.uniform(-3, 3, (2, N, 3))
    x0 = (np.array([[2.0, 2, 2], [8, 8, 8]]) + rng.normal(0, 0.5, (2, 3)), rng.normal(0, 0.5, (2, 3)))
    return s, cfg, A, x0


def test_criterion_05_gradient(acceptance_line):
    worst = 0.0
    for seed in range(10):
        s, cfg, A, x0 = _gradient_instance(seed)
        phi = build_mission_formula(s, cfg)
        f = lambda a: robustness_smooth(phi, integrate_dynamics(a, x0, cfg, ["A", "B"]), 0, cfg.lam)
        g = smooth_gradient(phi, integrate_dynamics(A, x0, cfg, ["A", "B"]), 0, cfg.lam)
        flat = A.reshape(-1)
        h = 1e-6
        for i in range(flat.size):
            e = np.zeros_like(flat)
            e[i] = h
            fd = (f(flat + e) - f(flat - e)) / (2 * h)
            err = abs(g[i] - fd)
            if err > 1e-8:
                worst = max(worst, err / max(abs(fd), 1e-300))
    ok = worst <= 1e-4
    acceptance_line(5, ok, f"10 instances x 300 components, worst relative error {worst:.2e}")
    assert ok


def test_criterion_06_primitives(acceptance_line):
    rng = np.random.default_rng(6)
    worst_p = worst_v = worst_bound = worst_t = 0.0
    vm = am = 3.1
    for _ in range(100):
        p0, p1 = rng.uniform(-20, 20, 3), rng.uniform(-20, 20, 3)
        T = min_time_rest_to_rest(p0, p1, vm, am)
        ref = 0.0
        for d in np.abs(p1 - p0):
            ref = max(ref, d / vm + vm / am if d >= vm * vm / am else 2 * math.sqrt(d / am))
        worst_t = max(worst_t, abs(T - ref))
        _, P, V, A = sample_primitive(p0, p1, T, 0.05, vm, am)
        worst_p = max(worst_p, float(np.abs(P[-1] - p1).max()))
        worst_v = max(worst_v, float(np.abs(V[-1]).max()))
        worst_bound = max(worst_bound, float(np.abs(V).max()) - vm, float(np.abs(A).max()) - am)
    ok = worst_p <= 1e-9 and worst_v <= 1e-9 and worst_bound <= 1e-9 and worst_t <= 1e-12
    acceptance_line(6, ok, f"endpoint {worst_p:.1e} m, speed {worst_v:.1e} m/s, "
                           f"bound excess {worst_bound:.1e}, min-time {worst_t:.1e}")
    assert ok


def test_criterion_07_replan(tmp_path, acceptance_line):
    s, cfg = load("scenario_A")
    _, plan_dir, _ = cli_plan("scenario_A")
    out = tmp_path / "replan"
    t0 = time.perf_counter()
    code = cli.main(["replan", "--plan", str(plan_dir), "--event", str(scenario_path("event_uav2_fail")),
                     "--scenario", str(scenario_path("scenario_A")), "--out", str(out)])
    wall = time.perf_counter() - t0
    same = (plan_dir / "trajectory_UAV1.csv").read_bytes() == (out / "trajectory_UAV1.csv").read_bytes()
    meta = io.read_yaml(out / "replan.yaml")
    r = parse_report((out / "report.txt").read_text())
    covered = all(float(r[f"dwell[{t}]"]) >= cfg.t_ins - 1e-9 for t in meta["pending"])
    ok = (code == 0 and same and meta["window_start"] == pytest.approx(19.0) and len(meta["pending"]) > 0
          and float(r["rho_exact"]) > 0 and covered and r["result"] == "PASS" and wall <= 300)
    acceptance_line(7, ok, f"pending={meta['pending']} rho={r['rho_exact']} UAV1 identical={same} wall={wall:.0f}s")
    assert ok


def test_criterion_08_energy(acceptance_line):
    s, cfg = load("scenario_A")
    _, base_dir, _ = cli_plan("scenario_A")
    code, eng_dir, _ = cli_plan("scenario_A", True)
    ids = [u.id for u in s.fleet]
    gap0 = mean_speed_gap(io.read_bundle(base_dir, ids), cfg.v_star)
    gap1 = mean_speed_gap(io.read_bundle(eng_dir, ids), cfg.v_star)
    rho0 = float(parse_report((base_dir / "report.txt").read_text())["rho_exact"])
    rho1 = float(parse_report((eng_dir / "report.txt").read_text())["rho_exact"])
    ok = code == 0 and gap1 < gap0 and 0 < rho1 <= rho0 + 1e-6
    acceptance_line(8, ok, f"mean |v_for - v*|: {gap1:.3f} (energy) vs {gap0:.3f} (plain); "
                           f"rho {rho1:.3f} vs {rho0:.3f}")
    assert ok


def test_criterion_09_clamp(acceptance_line):
    # m = 2 rho A and 4 kappa A = n_r f give v* = 1; scale the mass by 25 for v* = 5
    v = optimal_forward_speed(m=25 * 2 * 1.2 * 0.05, n_r=4, A=0.05, f=0.0575, kappa=1.15, rho_air=1.2,
                              v_bounds=(3.1, 3.1))
    raw = optimal_forward_speed(m=25 * 2 * 1.2 * 0.05, n_r=4, A=0.05, f=0.0575, kappa=1.15, rho_air=1.2)
    ok = raw == pytest.approx(5.0, rel=1e-12) and v == 3.1
    acceptance_line(9, ok, f"unclamped {raw:.6f} -> {v}")
    assert ok


def test_criterion_10_milp_only_crosses(tmp_path, acceptance_line):
    code_plan, plan_dir, _ = cli_plan("obstacle_crossing")
    args = ["validate", "--scenario", str(scenario_path("obstacle_crossing"))]
    code_guess = cli.main(args + ["--plan", str(plan_dir / "initial_guess"), "--out", str(tmp_path / "vg")])
    code_opt = cli.main(args + ["--plan", str(plan_dir), "--out", str(tmp_path / "vo")])
    rg = parse_report((tmp_path / "vg" / "report.txt").read_text())
    ro = parse_report((tmp_path / "vo" / "report.txt").read_text())
    ok = (code_plan == 0 and code_guess != 0 and float(rg["obstacle_clearance"]) <= 0
          and code_opt == 0 and float(ro["obstacle_clearance"]) > 0)
    acceptance_line(10, ok, f"guess clearance {rg['obstacle_clearance']} (exit {code_guess}), "
                            f"optimized {ro['obstacle_clearance']} (exit {code_opt})")
    assert ok
