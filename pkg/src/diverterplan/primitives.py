"""Rest-to-rest trapezoidal motion primitives and the routing-based initial guess."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .scenario import PlannerConfig, Scenario, SignalBundle, Trajectory


class InfeasibleDuration(ValueError):
    pass


class HorizonOverflowError(RuntimeError):
    def __init__(self, uav_id: str, required: float, t_N: float):
        self.uav_id = uav_id
        self.required = required
        self.t_N = t_N
        super().__init__(f"route of {uav_id} needs {required:.2f} s but the horizon is {t_N:.2f} s")


def _axis_min_time(d: float, v_max: float, a_max: float) -> float:
    d = abs(d)
    if d == 0.0:
        return 0.0
    if d >= v_max * v_max / a_max:
        return d / v_max + v_max / a_max
    return 2.0 * math.sqrt(d / a_max)


def min_time_rest_to_rest(p0, p1, v_max: float, a_max: float) -> float:
    if v_max <= 0 or a_max <= 0:
        raise ValueError("v_max and a_max must be positive")
    dp = np.asarray(p1, dtype=float) - np.asarray(p0, dtype=float)
    return max(_axis_min_time(float(d), v_max, a_max) for d in dp)


@dataclass(frozen=True)
class AxisProfile:
    """Trapezoid on one axis: accelerate at ``acc`` for ``t_acc``, cruise, decelerate."""

    p0: float
    p1: float
    duration: float
    acc: float  # signed
    t_acc: float

    @classmethod
    def fit(cls, p0: float, p1: float, T: float, a_max: float) -> "AxisProfile":
        d = p1 - p0
        if d == 0.0 or T == 0.0:
            return cls(p0, p1, T, 0.0, 0.0)
        dist = abs(d)
        disc = max(a_max * a_max * T * T - 4.0 * a_max * dist, 0.0)
        v_c = (a_max * T - math.sqrt(disc)) / 2.0
        return cls(p0, p1, T, math.copysign(a_max, d), v_c / a_max)

    @property
    def cruise_speed(self) -> float:
        return abs(self.acc) * self.t_acc

    def coefficients(self):
        """(t_start, t_end, c0, c1, c2) per piece, position = c0 + c1 s + c2 s^2 with s = t - t_start."""
        a, ta, T = self.acc, self.t_acc, self.duration
        vc = a * ta
        x1 = self.p0 + 0.5 * a * ta * ta
        x2 = self.p1 - 0.5 * a * ta * ta
        return [
            (0.0, ta, self.p0, 0.0, 0.5 * a),
            (ta, T - ta, x1, vc, 0.0),
            (T - ta, T, x2, vc, -0.5 * a),
        ]

    def state(self, t: np.ndarray):
        t = np.asarray(t, dtype=float)
        a, ta, T = self.acc, self.t_acc, self.duration
        p = np.full(t.shape, self.p1)
        v = np.zeros(t.shape)
        acc = np.zeros(t.shape)
        if a == 0.0:
            p[t < T] = self.p0
            return p, v, acc
        vc = a * ta
        up = t < ta
        cr = (t >= ta) & (t < T - ta)
        dn = (t >= T - ta) & (t < T)
        p[up] = self.p0 + 0.5 * a * t[up] ** 2
        v[up] = a * t[up]
        acc[up] = a
        p[cr] = self.p0 + 0.5 * a * ta * ta + vc * (t[cr] - ta)
        v[cr] = vc
        # measure the decel branch from the end so the endpoint is exact
        r = T - t[dn]
        p[dn] = self.p1 - 0.5 * a * r * r
        v[dn] = a * r
        acc[dn] = -a
        return p, v, acc


def sample_primitive(p0, p1, T: float, T_s: float, v_max: float = 3.1, a_max: float = 3.1):
    """Sample a synchronized trapezoid of duration ``T`` at ``k T_s``.

    Returns ``(t, p, v, a)`` with ``ceil(T/T_s) + 1`` rows; the last row is the
    rest state at ``p1``.
    """
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    Tmin = min_time_rest_to_rest(p0, p1, v_max, a_max)
    if T < Tmin - 1e-9:
        raise InfeasibleDuration(f"duration {T} s is below the minimum {Tmin} s")
    T = max(T, Tmin)
    n = int(math.ceil(T / T_s - 1e-9)) if T > 0 else 0
    t = np.arange(n + 1) * T_s
    P, V, A = np.empty((n + 1, 3)), np.empty((n + 1, 3)), np.empty((n + 1, 3))
    for j in range(3):
        prof = AxisProfile.fit(float(p0[j]), float(p1[j]), T, a_max)
        P[:, j], V[:, j], A[:, j] = prof.state(t)
    return t, P, V, A


def grid_segment(p0, p1, v_max: float, a_max: float, T_s: float, v_xy: float | None = None) -> np.ndarray:
    """Piecewise-constant accelerations moving rest-to-rest from ``p0`` to ``p1``.

    Each axis accelerates for ``n1`` steps, cruises, and decelerates for
    ``n1`` steps, all axes sharing the step count ``n``. Under zero-order hold
    the displacement is exactly ``alpha T_s^2 n1 (n - n1)`` so the segment
    lands on ``p1`` and stops, unlike a sampled continuous profile.

    ``v_xy`` caps the horizontal speed by sharing it between x and y in
    proportion to the displacement.
    """
    dp = np.asarray(p1, dtype=float) - np.asarray(p0, dtype=float)
    if not np.any(dp):
        return np.zeros((0, 3))
    vcap = [v_max] * 3
    hyp = math.hypot(dp[0], dp[1])
    if v_xy is not None and hyp > 0:
        for j in (0, 1):
            vcap[j] = min(v_max, v_xy * abs(dp[j]) / hyp) or v_max
    n = max(2, int(math.ceil(min_time_rest_to_rest(p0, p1, v_max, a_max) / T_s - 1e-9)))
    while True:
        plan = []
        for d, vb in zip(dp, vcap):
            dist = abs(float(d))
            if dist == 0.0:
                plan.append((0, 0.0))
                continue
            found = None
            for n1 in range(1, n // 2 + 1):
                alpha = dist / (T_s * T_s * n1 * (n - n1))
                if alpha <= a_max and alpha * n1 * T_s <= vb:
                    found = (n1, math.copysign(alpha, d))
                    break
            if found is None:
                break
            plan.append(found)
        if len(plan) == 3:
            break
        n += 1
    acc = np.zeros((n, 3))
    for j, (n1, alpha) in enumerate(plan):
        if n1:
            acc[:n1, j] = alpha
            acc[n - n1:, j] = -alpha
    return acc


def integrate_axis_free(x0, acc: np.ndarray, T_s: float):
    """ZOH double integrator from rest at ``x0``; returns positions and velocities."""
    n = acc.shape[0]
    v = np.zeros((n + 1, 3))
    p = np.zeros((n + 1, 3))
    p[0] = x0
    v[1:] = np.cumsum(acc, axis=0) * T_s
    p[1:] = x0 + np.cumsum(v[:-1] * T_s + 0.5 * acc * T_s * T_s, axis=0)
    return p, v


def route_waypoints(route: Sequence[int], graph, s: Scenario):
    """Stops of a route as (center, kind) pairs, skipping the depot."""
    out = []
    for v in route[1:]:
        kind = graph.kind(v)
        if kind == "target":
            out.append((s.targets[v].center, "target"))
        elif kind == "refill":
            out.append((s.refills[v - graph.n_targets].center, "refill"))
    return out


def assemble_accelerations(start, stops, cfg: PlannerConfig, n_total: int, uav_id: str = "",
                           lead_steps: int = 0, v_xy: float | None = None) -> np.ndarray:
    """Acceleration sequence of length ``n_total`` visiting ``stops`` from rest at ``start``.

    ``stops`` holds (point, dwell_steps) pairs. The UAV waits ``lead_steps``
    before leaving and holds after the last stop.
    """
    pieces = [np.zeros((lead_steps, 3))]
    cur = np.asarray(start, dtype=float)
    for point, dwell in stops:
        pieces.append(grid_segment(cur, point, cfg.v_max, cfg.a_max, cfg.T_s, v_xy))
        pieces.append(np.zeros((dwell, 3)))
        cur = np.asarray(point, dtype=float)
    acc = np.concatenate(pieces, axis=0)
    if acc.shape[0] > n_total:
        raise HorizonOverflowError(uav_id, acc.shape[0] * cfg.T_s, n_total * cfg.T_s)
    return np.concatenate([acc, np.zeros((n_total - acc.shape[0], 3))], axis=0)


def build_initial_guess(routes, s: Scenario, cfg: PlannerConfig, graph=None,
                        v_xy: float | None = None) -> SignalBundle:
    """Dynamically consistent guess following each UAV's route with dwells at the stops.

    ``v_xy`` optionally caps the horizontal cruise speed, e.g. at the
    energy-optimal forward speed.
    """
    from .routing import build_graph

    g = graph if graph is not None else build_graph(s)
    N = cfg.N
    trajs = []
    for d, uav in enumerate(s.fleet):
        route = routes.routes[d] if d < len(routes.routes) else (g.depot_vertex(d),)
        stops = [(c, cfg.n_ins if kind == "target" else cfg.n_rs)
                 for c, kind in route_waypoints(route, g, s)]
        acc = assemble_accelerations(uav.depot, stops, cfg, N, uav.id, v_xy=v_xy)
        p, v = integrate_axis_free(uav.depot, acc, cfg.T_s)
        trajs.append(Trajectory(uav.id, p, v, acc))
    return SignalBundle(tuple(trajs), cfg.T_s)
