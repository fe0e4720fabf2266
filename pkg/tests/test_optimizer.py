import numpy as np
import pytest

from diverterplan.optimizer import (DomainError, EventError, FailureEvent, PlanResult, check_event,
                                    dynamics_residual, forward_speed, integrate_dynamics, mean_speed_gap,
                                    optimal_forward_speed, optimize_plan, optimize_plan_energy,
                                    pending_targets, replan)
from diverterplan.primitives import build_initial_guess, grid_segment, integrate_axis_free
from diverterplan.routing import build_graph, solution_from_routes
from diverterplan.scenario import Box3, PlannerConfig, Scenario, SignalBundle, Trajectory, UavSpec
from diverterplan.stl import Always, And, InBox, PairDist, robustness_exact


def test_integrate_constant_acceleration():
    cfg = PlannerConfig(t_N=1.0, t_ins=0.2, t_rs=0.3, T_s=0.1)
    A = np.zeros((1, 10, 3))
    A[0, :, 0] = 1.0
    b = integrate_dynamics(A, (np.zeros((1, 3)), np.zeros((1, 3))), cfg)
    k = np.arange(11)
    np.testing.assert_allclose(b["UAV1"].v[:, 0], 0.1 * k, atol=1e-15)
    np.testing.assert_allclose(b["UAV1"].p[:, 0], 0.005 * k ** 2, atol=1e-15)
    assert dynamics_residual(b) < 1e-15


def test_integrate_initial_velocity_and_ids():
    cfg = PlannerConfig(t_N=1.0, t_ins=0.2, t_rs=0.3, T_s=0.1)
    b = integrate_dynamics(np.zeros(2 * 10 * 3), (np.zeros((2, 3)), np.array([[1.0, 0, 0], [0, 2.0, 0]])),
                           cfg, ["a", "b"])
    assert b.ids == ["a", "b"]
    assert b["a"].p[-1, 0] == pytest.approx(1.0)
    assert b["b"].p[-1, 1] == pytest.approx(2.0)


def test_residual_detects_tampering():
    cfg = PlannerConfig(t_N=1.0, t_ins=0.2, t_rs=0.3, T_s=0.1)
    b = integrate_dynamics(np.ones((1, 10, 3)), (np.zeros((1, 3)), np.zeros((1, 3))), cfg)
    tr = b.trajectories[0]
    p = tr.p.copy()
    p[5, 1] += 0.01
    assert dynamics_residual(SignalBundle((Trajectory("x", p, tr.v, tr.a),), 0.1)) > 1e-3


def test_forward_speed_ignores_vertical():
    assert forward_speed([3.0, 4.0, 7.0]) == 5.0
    np.testing.assert_allclose(forward_speed(np.array([[1.0, 0, 0], [0, 0, 2.0]])), [1.0, 0.0])


def test_optimal_forward_speed_reference():
    # sqrt(2 / (2 * 1.2 * 0.05)) * (4 * 1.15 * 0.05 / (4 * 0.01)) ** 0.25
    v = optimal_forward_speed(m=2.0, n_r=4, A=0.05, f=0.01, kappa=1.15, rho_air=1.2)
    assert v == pytest.approx(6.32180849870294, rel=1e-12)


def test_optimal_forward_speed_clamp_and_domain():
    v = optimal_forward_speed(m=2.0, n_r=4, A=0.05, f=0.01, kappa=1.15, rho_air=1.2, v_bounds=(3.1, 3.1))
    assert v == 3.1
    assert optimal_forward_speed(m=0.1, n_r=4, A=0.05, f=0.01, kappa=1.15, rho_air=1.2,
                                 v_bounds=(3.1, 3.1)) < 3.1
    for bad in ("m", "A", "f", "n_r", "kappa", "rho_air"):
        kw = dict(m=2.0, n_r=4, A=0.05, f=0.01, kappa=1.15, rho_air=1.2)
        kw[bad] = 0.0
        with pytest.raises(DomainError):
            optimal_forward_speed(**kw)


def test_mean_speed_gap():
    cfg = PlannerConfig(t_N=1.0, t_ins=0.2, t_rs=0.3, T_s=0.1)
    b = integrate_dynamics(np.zeros((1, 10, 3)), (np.zeros((1, 3)), np.array([[2.0, 0, 0]])), cfg)
    assert mean_speed_gap(b, 2.5) == pytest.approx(0.5)
    still = integrate_dynamics(np.zeros((1, 10, 3)), (np.zeros((1, 3)), np.zeros((1, 3))), cfg)
    assert mean_speed_gap(still, 2.5) == 0.0


# two vehicles swapping sides along almost the same line
HEAD_CFG = PlannerConfig(t_N=10.0, t_ins=1.0, t_rs=1.0, max_iters=150)
GOAL_A = Box3([16, 3, 3], [20, 7, 7])
GOAL_B = Box3([0, 3, 3], [4, 7, 7])


def _head_on():
    N = HEAD_CFG.N
    starts = [np.array([2.0, 5.1, 5.0]), np.array([18.0, 4.9, 5.0])]
    ends = [np.array([18.0, 5.1, 5.0]), np.array([2.0, 4.9, 5.0])]
    trajs = []
    for uid, p0, p1 in zip("AB", starts, ends):
        acc = grid_segment(p0, p1, HEAD_CFG.v_max, HEAD_CFG.a_max, HEAD_CFG.T_s)
        acc = np.vstack([acc, np.zeros((N - acc.shape[0], 3))])
        p, v = integrate_axis_free(p0, acc, HEAD_CFG.T_s)
        trajs.append(Trajectory(uid, p, v, acc))
    phi = And(Always(0, N, PairDist("A", "B", HEAD_CFG.Gamma)),
              Always(N, N, InBox("A", GOAL_A)), Always(N, N, InBox("B", GOAL_B)))
    return SignalBundle(tuple(trajs), HEAD_CFG.T_s), phi


@pytest.fixture(scope="module")
def head_on_result():
    guess, phi = _head_on()
    return guess, phi, optimize_plan(guess, phi, HEAD_CFG)


def test_head_on_separates(head_on_result):
    guess, phi, res = head_on_result
    assert robustness_exact(phi, guess, 0) < 0
    assert res.rho_exact > 0
    d = np.linalg.norm(res.bundle["A"].p - res.bundle["B"].p, axis=1)
    assert d.min() > HEAD_CFG.Gamma
    assert np.abs(res.bundle.accelerations).max() <= HEAD_CFG.a_max + 1e-12
    assert np.abs(res.bundle.velocities).max() <= HEAD_CFG.v_max + 1e-9
    assert dynamics_residual(res.bundle) < 1e-9


def test_accepted_steps_increase_objective(head_on_result):
    _, _, res = head_on_result
    J = [h[1] for h in res.history]
    assert len(J) > 2
    assert all(b > a for a, b in zip(J, J[1:]))


def test_deterministic(head_on_result):
    guess, phi, res = head_on_result
    again = optimize_plan(guess, phi, HEAD_CFG)
    np.testing.assert_array_equal(again.bundle.positions, res.bundle.positions)


def test_energy_with_zero_weight_matches_plain():
    guess, phi = _head_on()
    cfg = HEAD_CFG.with_(max_iters=20)
    a = optimize_plan(guess, phi, cfg)
    b = optimize_plan_energy(guess, phi, cfg.with_(eta=0.0))
    np.testing.assert_array_equal(a.bundle.accelerations, b.bundle.accelerations)
    with pytest.raises(DomainError):
        optimize_plan_energy(guess, phi, cfg.with_(v_star=0.0))


def test_frozen_vehicle_untouched():
    guess, phi = _head_on()
    res = optimize_plan(guess, phi, HEAD_CFG.with_(max_iters=30), free_from={"B": 0})
    np.testing.assert_array_equal(res.bundle["A"].p, guess["A"].p)


def test_guess_must_follow_dynamics():
    guess, phi = _head_on()
    tr = guess.trajectories[0]
    p = tr.p.copy()
    p[10] += 1.0
    bad = SignalBundle((Trajectory("A", p, tr.v, tr.a), guess.trajectories[1]), guess.T_s)
    with pytest.raises(DomainError):
        optimize_plan(bad, phi, HEAD_CFG)


def test_zero_iterations_returns_guess():
    guess, phi = _head_on()
    res = optimize_plan(guess, phi, HEAD_CFG.with_(max_iters=0))
    np.testing.assert_array_equal(res.bundle.positions, guess.positions)


# ------------------------------------------------------------ replanning

SMALL = PlannerConfig(t_N=60.0, t_ins=2.0, t_rs=3.0, t_rep=2.0, sigma_bar=1e6, max_iters=60)


def _small():
    return Scenario(Box3([0, 0, 0], [40, 30, 10]), [],
                    [Box3([9, 4, 4], [11, 6, 6], "T1"), Box3([9, 24, 4], [11, 26, 6], "T2"),
                     Box3([29, 24, 4], [31, 26, 6], "T3")],
                    [Box3([0, 0, 0], [4, 4, 2], "R1"), Box3([18, 20, 0], [22, 24, 2], "R2")],
                    [UavSpec("U1", 2, [2, 2, 1]), UavSpec("U2", 2, [20, 22, 1])])


def _small_plan():
    s = _small()
    g = build_graph(s)
    routes = solution_from_routes(g, [(g.depot_vertex(0), 0, 3), (g.depot_vertex(1), 1, 2, 4)])
    guess = build_initial_guess(routes, s, SMALL, g)
    return s, PlanResult(guess, 0.0, 0.0, 0, 0.0)


def test_pending_split():
    s, plan = _small_plan()
    P = plan.bundle["U2"].p
    pending, done = pending_targets(P, s, SMALL, 0)
    assert (pending, done) == ([1, 2], [])
    pending, done = pending_targets(P, s, SMALL, SMALL.N)
    assert (pending, done) == ([], [1, 2])


def test_event_checks():
    s, plan = _small_plan()
    ids = plan.bundle.ids
    backup = UavSpec("U3", 2, [20, 22, 1])
    check_event(FailureEvent("U2", 5.0, backup), s, SMALL, ids)
    with pytest.raises(EventError, match="outside"):
        check_event(FailureEvent("U2", 61.0, backup), s, SMALL, ids)
    with pytest.raises(EventError, match="not part"):
        check_event(FailureEvent("U7", 5.0, backup), s, SMALL, ids)
    with pytest.raises(EventError, match="already"):
        check_event(FailureEvent("U2", 5.0, UavSpec("U1", 2, [20, 22, 1])), s, SMALL, ids)
    with pytest.raises(EventError, match="refill"):
        check_event(FailureEvent("U2", 5.0, UavSpec("U3", 2, [30, 10, 5])), s, SMALL, ids)
    with pytest.raises(EventError, match="time"):
        check_event(FailureEvent("U2", 57.0, backup), s, SMALL, ids)


def test_replan_takes_over_pending_targets():
    s, plan = _small_plan()
    rr = replan(plan, FailureEvent("U2", 1.0, UavSpec("U3", 2, [20, 22, 1])), s, SMALL)
    assert rr.pending == (1, 2) and rr.completed == ()
    assert rr.k_start == SMALL.steps(3.0)
    assert rr.plan.bundle.ids == ["U1", "U3"]
    np.testing.assert_array_equal(rr.plan.bundle["U1"].p, plan.bundle["U1"].p)
    b = rr.plan.bundle["U3"].p
    np.testing.assert_array_equal(b[:rr.k_start + 1], np.tile([20, 22, 1], (rr.k_start + 1, 1)))
    assert rr.plan.report.passed, rr.plan.report.to_text()
    assert rr.plan.rho_exact > 0


def test_replan_with_nothing_pending():
    s, plan = _small_plan()
    rr = replan(plan, FailureEvent("U2", 50.0, UavSpec("U3", 2, [20, 22, 1])), s, SMALL)
    assert rr.pending == () and rr.completed == (1, 2)
    assert rr.backup_route == ()
    assert np.all(rr.plan.bundle["U3"].p == [20, 22, 1])


def test_empty_backup_refills_first():
    s, plan = _small_plan()
    rr = replan(plan, FailureEvent("U2", 1.0, UavSpec("U3", 2, [20, 22, 1]), payload=0), s, SMALL)
    b = rr.plan.bundle["U3"].p
    k = rr.k_start
    assert np.all(b[k:k + SMALL.n_rs + 1] == [20, 22, 1])
    assert rr.plan.report.passed, rr.plan.report.to_text()
