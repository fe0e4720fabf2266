"""Robustness maximization over acceleration sequences, energy-aware variant and replanning."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .scenario import PlannerConfig, Scenario, SignalBundle, Trajectory, UavSpec
from .stl import (Formula, chain_to_accelerations, robustness_exact,
                  smooth_value_and_position_grad)

VEL_PENALTY = 1e3
STEP0 = 1e-2
SHRINK = 0.5
MAX_BACKTRACKS = 20
STALL_WINDOW = 25
STALL_TOL = 1e-6
SMOOTH_SECONDS = 1.0
SPEED_EPS = 1e-6


class DomainError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    def __init__(self, msg: str, iterate: np.ndarray):
        super().__init__(msg)
        self.iterate = iterate


def integrate_dynamics(dec: np.ndarray, x0, cfg: PlannerConfig, ids: Sequence[str] | None = None) -> SignalBundle:
    """Zero-order-hold double integrator for every UAV.

    ``dec`` is (δ, N, 3) or flat; ``x0`` is a pair of (δ, 3) arrays holding
    initial positions and velocities.
    """
    P0, V0 = (np.asarray(x, dtype=float) for x in x0)
    n_uav = P0.shape[0]
    A = np.asarray(dec, dtype=float).reshape(n_uav, -1, 3)
    Ts = cfg.T_s
    N = A.shape[1]
    V = np.empty((n_uav, N + 1, 3))
    P = np.empty((n_uav, N + 1, 3))
    V[:, 0] = V0
    V[:, 1:] = V0[:, None, :] + np.cumsum(A, axis=1) * Ts
    P[:, 0] = P0
    P[:, 1:] = P0[:, None, :] + np.cumsum(V[:, :-1] * Ts + 0.5 * A * Ts * Ts, axis=1)
    ids = list(ids) if ids is not None else [f"UAV{i + 1}" for i in range(n_uav)]
    return SignalBundle(tuple(Trajectory(u, P[i], V[i], A[i]) for i, u in enumerate(ids)), Ts)


def dynamics_residual(bundle: SignalBundle) -> float:
    """Largest mismatch between stored states and a fresh integration of the stored inputs."""
    Ts = bundle.T_s
    worst = 0.0
    for tr in bundle.trajectories:
        v = tr.v[:-1] + tr.a * Ts
        p = tr.p[:-1] + tr.v[:-1] * Ts + 0.5 * tr.a * Ts * Ts
        scale = 1.0 + np.abs(tr.p[1:]).max()
        worst = max(worst, float(np.abs(v - tr.v[1:]).max(initial=0.0)),
                    float(np.abs(p - tr.p[1:]).max(initial=0.0)) / scale)
    return worst


def forward_speed(v) -> float | np.ndarray:
    v = np.asarray(v, dtype=float)
    return np.sqrt(v[..., 0] ** 2 + v[..., 1] ** 2)


def optimal_forward_speed(m: float, n_r: float, A: float, f: float, kappa: float, rho_air: float,
                          v_bounds=(math.inf, math.inf)) -> float:
    """Energy-optimal cruise speed of a multirotor, clamped to the horizontal speed bound."""
    for name, val in (("m", m), ("n_r", n_r), ("A", A), ("f", f), ("kappa", kappa), ("rho_air", rho_air)):
        if not val > 0:
            raise DomainError(f"{name} must be positive, got {val}")
    v = math.sqrt(m / (2.0 * rho_air * A)) * (4.0 * kappa * A / (n_r * f)) ** 0.25
    cap = max(float(b) for b in v_bounds[:2])
    return min(v, cap)


@dataclass(frozen=True, eq=False)
class ValidationStub:
    passed: bool = True


@dataclass(frozen=True, eq=False)
class PlanResult:
    bundle: SignalBundle
    rho_exact: float
    rho_smooth: float
    iterations: int
    wall_time: float
    report: object = None
    energy: float | None = None
    infeasible_tradeoff: bool = False
    history: tuple = ()


@dataclass(frozen=True)
class FailureEvent:
    failed_uav: str
    t_fail: float
    backup: UavSpec  # depot holds the start position
    payload: int | None = None


# ------------------------------------------------------------ objective pieces


def _velocity_penalty(V: np.ndarray, v_max: float, rows: np.ndarray):
    over = np.maximum(np.abs(V) - v_max, 0.0)
    over[~rows] = 0.0
    val = VEL_PENALTY * float(np.sum(over * over))
    gV = VEL_PENALTY * 2.0 * over * np.sign(V)
    return val, gV


def _energy(V: np.ndarray, v_star: float, rows: np.ndarray):
    vf = np.sqrt(V[..., 0] ** 2 + V[..., 1] ** 2 + SPEED_EPS**2)
    r = 1.0 - vf / v_star
    r = np.where(rows[..., 0], r, 0.0)
    val = float(np.sum(r * r))
    gV = np.zeros_like(V)
    coef = -2.0 * r / (v_star * vf)
    gV[..., 0] = coef * V[..., 0]
    gV[..., 1] = coef * V[..., 1]
    return val, gV


def mean_speed_gap(bundle: SignalBundle, v_star: float, start: int = 0, moving: float = 0.1,
                   ids: Sequence[str] | None = None) -> float:
    """Mean |v_for - v*| over samples where the UAV moves faster than ``moving``."""
    gaps = []
    for tr in bundle.trajectories:
        if ids is not None and tr.uav_id not in ids:
            continue
        vf = forward_speed(tr.v[start:])
        gaps.append(np.abs(vf[vf > moving] - v_star))
    allg = np.concatenate(gaps) if gaps else np.array([])
    return float(allg.mean()) if allg.size else 0.0


def _smooth_rows(X: np.ndarray, width: int) -> np.ndarray:
    """Gaussian smoothing along the sample axis of a (δ, K, 3) array."""
    if width < 1:
        return X
    k = np.arange(-3 * width, 3 * width + 1)
    ker = np.exp(-0.5 * (k / width) ** 2)
    ker /= ker.sum()
    out = np.empty_like(X)
    for i in range(X.shape[0]):
        for j in range(3):
            out[i, :, j] = np.convolve(X[i, :, j], ker, mode="same")
    return out


class _Problem:
    def __init__(self, guess: SignalBundle, phi: Formula, cfg: PlannerConfig, free: np.ndarray,
                 eta: float, k0: int, rows: np.ndarray):
        self.ids = guess.ids
        self.cfg = cfg
        self.phi = phi
        self.P0 = guess.positions[:, 0].copy()
        self.V0 = guess.velocities[:, 0].copy()
        self.free = free  # (δ, N) bool over acceleration samples
        self.eta = eta
        self.k0 = k0
        self.rows = rows  # (δ, N+1, 1) bool: samples where penalties apply

    def states(self, A):
        Ts = self.cfg.T_s
        V = np.concatenate([self.V0[:, None], self.V0[:, None] + np.cumsum(A, axis=1) * Ts], axis=1)
        P = np.concatenate([self.P0[:, None],
                            self.P0[:, None] + np.cumsum(V[:, :-1] * Ts + 0.5 * A * Ts * Ts, axis=1)], axis=1)
        return P, V

    def evaluate(self, A, grad=True):
        cfg = self.cfg
        P, V = self.states(A)
        rho, gP = smooth_value_and_position_grad(self.phi, P, self.ids, 0, cfg.lam)
        pen, gVp = _velocity_penalty(V, cfg.v_max, self.rows[..., 0])
        gV = -gVp
        en = 0.0
        if self.eta > 0:
            en, gVe = _energy(V, cfg.v_star, self.rows)
            gV = gV - self.eta * gVe
        J = rho - pen - self.eta * en
        if not grad:
            return J, rho, en, None, None
        return J, rho, en, gP, gV

    def direction(self, gP, gV, ga, A):
        """Ascent direction from a smoothed position-space gradient.

        Velocity terms are moved to positions through the central difference
        ``v_k ~ (p_{k+1} - p_{k-1}) / 2 T_s``; the smoothed position step is
        converted to accelerations by second differences. Falls back to the
        plain gradient when that is not an ascent direction.
        """
        Ts = self.cfg.T_s
        G = gP.copy()
        G[:, :-1] -= gV[:, 1:] / (2 * Ts)
        G[:, 1:] += gV[:, :-1] / (2 * Ts)
        # positions that cannot move under the free mask
        movable = np.zeros(G.shape[:2], dtype=bool)
        movable[:, 1:] = np.cumsum(self.free, axis=1) > 0
        movable[:, 1:-1] &= movable[:, :-2]
        G[~movable] = 0.0
        width = max(1, int(round(SMOOTH_SECONDS / Ts)))
        G = _smooth_rows(G, width)
        G[~movable] = 0.0
        d = (G[:, 2:] - 2 * G[:, 1:-1] + G[:, :-2]) / (Ts * Ts)
        d = np.concatenate([d, np.zeros_like(d[:, :1])], axis=1)
        # drop components that would only push a saturated input further out
        a_max = self.cfg.a_max
        pinned = lambda x: ((A >= a_max - 1e-12) & (x > 0)) | ((A <= -a_max + 1e-12) & (x < 0))
        d[~self.free[..., None] | pinned(d)] = 0.0
        g = ga.copy()
        g[~self.free[..., None] | pinned(g)] = 0.0
        if float(np.sum(d * g)) <= 0.0:
            d = g
        return d


def _flat_free_mask(guess: SignalBundle, free_from: dict[str, int] | None) -> np.ndarray:
    N = guess.N
    mask = np.zeros((len(guess.ids), N), dtype=bool)
    if free_from is None:
        mask[:] = True
    else:
        for u, k in free_from.items():
            mask[guess.index(u), k:] = True
    return mask


def _ascend(guess: SignalBundle, phi: Formula, cfg: PlannerConfig, *, eta: float = 0.0,
            free_from: dict[str, int] | None = None, k0: int = 0, scenario=None):
    t_start = time.perf_counter()
    if dynamics_residual(guess) > 1e-6:
        raise DomainError("initial guess is not consistent with the dynamics")
    free = _flat_free_mask(guess, free_from)
    rows = np.zeros((len(guess.ids), guess.N + 1, 1), dtype=bool)
    for i in range(len(guess.ids)):
        if free[i].any():
            rows[i, k0:] = True
    prob = _Problem(guess, phi, cfg, free, eta, k0, rows)
    rng = np.random.default_rng(cfg.seed)

    A = guess.accelerations.copy()
    a_max = cfg.a_max
    v_tol = cfg.v_max + 1e-9

    def exact_of(A_):
        P, V = prob.states(A_)
        ok = bool(np.all(np.abs(V[rows[..., 0]]) <= v_tol))
        return robustness_exact(phi, (P, prob.ids), 0), ok, V

    J, rho, en, gP, gV = prob.evaluate(A)
    if not math.isfinite(J):
        raise NumericalFailure("objective is not finite at the initial guess", A.reshape(-1))
    rho_ex, ok, V = exact_of(A)
    history = [(0, J, rho, rho_ex)]
    cands = [(A.copy(), rho_ex, rho, en, ok)]
    step = STEP0
    it = 0
    for it in range(1, cfg.max_iters + 1):
        ga = chain_to_accelerations(gP, gV, cfg.T_s)
        ga[~free] = 0.0
        d = prob.direction(gP, gV, ga, A)
        scale = float(np.abs(d).max())
        if scale < 1e-14:
            # symmetric configurations can zero the gradient, break the tie
            d = rng.standard_normal(A.shape) * free
            scale = float(np.abs(d).max()) or 1.0
        d = d / scale
        accepted = False
        for _ in range(MAX_BACKTRACKS + 1):
            A_try = np.clip(A + step * d, -a_max, a_max)
            J_try, rho_t, en_t, gP_t, gV_t = prob.evaluate(A_try)
            if not math.isfinite(J_try):
                raise NumericalFailure(f"objective became non-finite at iteration {it}", A_try.reshape(-1))
            if J_try > J:
                accepted = True
                break
            step *= SHRINK
        if not accepted:
            break
        A, J, rho, en, gP, gV = A_try, J_try, rho_t, en_t, gP_t, gV_t
        step = min(step * 2.0, a_max)
        rho_ex, ok, V = exact_of(A)
        cands.append((A.copy(), rho_ex, rho, en, ok))
        history.append((it, J, rho, rho_ex))
        if it >= STALL_WINDOW and J - history[-STALL_WINDOW - 1][1] < STALL_TOL:
            break

    best = _select(cands, eta)
    A_b, rho_ex_b, rho_b, en_b, _ = cands[best]
    bundle = integrate_dynamics(A_b, (prob.P0, prob.V0), cfg, prob.ids)
    tradeoff = eta > 0 and not rho_ex_b > 0
    report = None
    if scenario is not None:
        from .validate import validate_bundle
        report = validate_bundle(bundle, scenario, cfg, start=k0,
                                 uav_ids=[u for i, u in enumerate(prob.ids) if free[i].any()] if free_from else None)
    return PlanResult(bundle, rho_ex_b, rho_b, it, time.perf_counter() - t_start, report,
                      en_b if eta > 0 else None, tradeoff, tuple(history))


def _select(cands, eta):
    """Index of the returned iterate.

    Without the energy term: highest exact robustness among velocity-feasible
    iterates, the guess winning ties. With it: best robustness-minus-energy
    among feasible iterates with positive exact robustness.
    """
    feas = [i for i, c in enumerate(cands) if c[4]] or [0]
    if eta > 0:
        pos = [i for i in feas if cands[i][1] > 0]
        if pos:
            return max(pos, key=lambda i: (cands[i][1] - eta * cands[i][3], -i))
    return max(feas, key=lambda i: (cands[i][1], -i))


def optimize_plan(guess: SignalBundle, phi: Formula, cfg: PlannerConfig, *, scenario: Scenario | None = None,
                  free_from: dict[str, int] | None = None, k0: int = 0) -> PlanResult:
    return _ascend(guess, phi, cfg, eta=0.0, free_from=free_from, k0=k0, scenario=scenario)


def optimize_plan_energy(guess: SignalBundle, phi: Formula, cfg: PlannerConfig, *,
                         scenario: Scenario | None = None, free_from: dict[str, int] | None = None,
                         k0: int = 0) -> PlanResult:
    if not cfg.v_star > 0:
        raise DomainError("v_star must be positive")
    return _ascend(guess, phi, cfg, eta=cfg.eta, free_from=free_from, k0=k0, scenario=scenario)


# ------------------------------------------------------------ replanning


class EventError(ValueError):
    pass


def qualifying_dwells(P: np.ndarray, box, n_min: int) -> list[tuple[int, int]]:
    """(start, length) of every stay inside ``box`` lasting at least ``n_min`` samples."""
    flags = np.all((P >= box.lo) & (P <= box.hi), axis=-1)
    f = np.concatenate([[False], flags, [False]]).astype(np.int8)
    edges = np.flatnonzero(np.diff(f))
    return [(int(a), int(b - a)) for a, b in zip(edges[::2], edges[1::2]) if b - a >= n_min]


def pending_targets(P: np.ndarray, s: Scenario, cfg: PlannerConfig, k_fail: int) -> tuple[list[int], list[int]]:
    """Targets a UAV was planned to install, split into (pending, completed by ``k_fail``)."""
    n = cfg.n_ins + 1
    planned, done = [], []
    for t, box in enumerate(s.targets):
        dw = qualifying_dwells(P, box, n)
        if not dw:
            continue
        planned.append(t)
        if any(a + n - 1 <= k_fail for a, _ in dw):
            done.append(t)
    return [t for t in planned if t not in done], done


@dataclass(frozen=True, eq=False)
class ReplanResult:
    plan: PlanResult  # combined bundle: non-faulty UAVs then the backup
    pending: tuple[int, ...]
    completed: tuple[int, ...]
    k_start: int
    backup_route: tuple[int, ...]


def check_event(event: FailureEvent, s: Scenario, cfg: PlannerConfig, ids: Sequence[str]):
    if not 0.0 <= event.t_fail <= cfg.t_N:
        raise EventError(f"t_fail={event.t_fail} lies outside the mission [0, {cfg.t_N}]")
    if event.failed_uav not in ids:
        raise EventError(f"failed UAV {event.failed_uav} is not part of the plan")
    if event.backup.id in ids:
        raise EventError(f"backup id {event.backup.id} is already an active UAV")
    if not any(b.contains_point(event.backup.depot) for b in s.refills):
        raise EventError("backup start must lie inside a refill station")
    if event.t_fail + cfg.t_rep > cfg.t_N - cfg.t_ins:
        raise EventError("no time is left after the replanning budget")


def replan(original: PlanResult, event: FailureEvent, s: Scenario, cfg: PlannerConfig) -> ReplanResult:
    """Plan a backup UAV for the failed UAV's pending targets, others frozen."""
    from .primitives import assemble_accelerations
    from .routing import RoutingGraph, solve_routing
    from .stl import build_mission_formula
    from .validate import validate_bundle

    ob = original.bundle
    check_event(event, s, cfg, ob.ids)
    N = cfg.N
    k_fail = int(round(event.t_fail / cfg.T_s))
    k_s = int(round((event.t_fail + cfg.t_rep) / cfg.T_s))
    pending, done = pending_targets(ob[event.failed_uav].p, s, cfg, k_fail)
    backup = event.backup
    payload = backup.capacity if event.payload is None else int(event.payload)
    start = np.asarray(backup.depot, dtype=float)

    stops = []
    route: tuple[int, ...] = ()
    if payload == 0 and pending:
        # already parked at a station: load before leaving
        stops.append((start, cfg.n_rs))
        payload = backup.capacity
    if pending:
        g = RoutingGraph(np.vstack([[s.targets[t].center for t in pending],
                                    [b.center for b in s.refills], [start]]),
                         len(pending), len(s.refills), (backup.capacity,), (backup.id,), (payload,))
        sol = solve_routing(g, cfg)
        route = sol.routes[0]
        for v in route[1:]:
            if g.kind(v) == "target":
                stops.append((s.targets[pending[v]].center, cfg.n_ins))
            else:
                stops.append((s.refills[v - g.n_targets].center, cfg.n_rs))
    acc = assemble_accelerations(start, stops, cfg, N, backup.id, lead_steps=k_s)

    keep = [tr for tr in ob.trajectories if tr.uav_id != event.failed_uav]
    ids = [tr.uav_id for tr in keep] + [backup.id]
    b_bundle = integrate_dynamics(acc[None], (start[None], np.zeros((1, 3))), cfg, [backup.id])
    guess = SignalBundle(tuple(keep) + b_bundle.trajectories, cfg.T_s)
    s_ext = Scenario(s.workspace, s.obstacles, s.targets, s.refills, tuple(s.fleet) + (backup,))

    phi = build_mission_formula(s_ext, cfg, {backup.id: pending}, start=k_s, uav_ids=ids, targets=pending)
    if pending:
        res = optimize_plan(guess, phi, cfg, free_from={backup.id: k_s}, k0=k_s)
        new_backup = res.bundle[backup.id]
    else:
        res = None
        new_backup = b_bundle.trajectories[0]
    combined = SignalBundle(tuple(keep) + (new_backup,), cfg.T_s)
    report = validate_bundle(combined, s_ext, cfg, start=k_s, targets=pending,
                             loads={backup.id: payload})
    rho = report.get("rho_exact").value
    plan = PlanResult(combined, rho, report.get("rho_smooth").value,
                      res.iterations if res else 0, res.wall_time if res else 0.0, report,
                      history=res.history if res else ())
    return ReplanResult(plan, tuple(pending), tuple(done), k_s, route)
