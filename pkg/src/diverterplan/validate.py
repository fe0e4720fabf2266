"""Sample-based mission checks, independent of planner internals."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .scenario import Box3, PlannerConfig, Scenario, SignalBundle
from .stl import build_mission_formula, robustness_exact, robustness_smooth

BOUND_TOL = 1e-9
DYN_TOL = 1e-6


class GridMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Record:
    key: str
    value: object
    passed: bool | None  # None marks an informational record
    detail: str = ""


@dataclass
class ValidationReport:
    records: list[Record] = field(default_factory=list)
    capacity_trace: dict[str, np.ndarray] = field(default_factory=dict)
    capacity_log: dict[str, list[tuple[float, str, int]]] = field(default_factory=dict)

    def add(self, key, value, passed, detail=""):
        self.records.append(Record(key, value, passed, detail))

    @property
    def passed(self) -> bool:
        return all(r.passed is not False for r in self.records)

    def get(self, key: str) -> Record:
        for r in self.records:
            if r.key == key:
                return r
        raise KeyError(key)

    def failures(self) -> list[str]:
        return [r.key for r in self.records if r.passed is False]

    def to_text(self) -> str:
        lines = []
        for r in self.records:
            val = _fmt(r.value)
            status = "info" if r.passed is None else ("ok" if r.passed else "FAIL")
            line = f"{r.key} = {val} [{status}]"
            if r.detail:
                line += f" {r.detail}"
            lines.append(line)
        lines.append(f"result = {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}" if math.isfinite(v) else str(v)
    return str(v)


def parse_report(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if " = " in line:
            k, rest = line.split(" = ", 1)
            out[k.strip()] = rest.split(" [")[0].strip()
    return out


def box_margins(P: np.ndarray, box: Box3) -> np.ndarray:
    """Signed distance-like margin of each row of ``P`` to the box faces (positive inside)."""
    return np.minimum(P - box.lo, box.hi - P).min(axis=-1)


def inside(P: np.ndarray, box: Box3) -> np.ndarray:
    return np.all((P >= box.lo) & (P <= box.hi), axis=-1)


def longest_run(flags: np.ndarray) -> tuple[int, int]:
    """Length and start index of the longest run of True values."""
    best, best_start, cur, start = 0, -1, 0, 0
    for i, f in enumerate(flags):
        if f:
            if cur == 0:
                start = i
            cur += 1
            if cur > best:
                best, best_start = cur, start
        else:
            cur = 0
    return best, best_start


def runs(flags: np.ndarray) -> list[tuple[int, int]]:
    """(start, length) of every run of True values."""
    f = np.concatenate([[False], np.asarray(flags, dtype=bool), [False]])
    edges = np.flatnonzero(np.diff(f.astype(np.int8)))
    return [(int(a), int(b - a)) for a, b in zip(edges[::2], edges[1::2])]


def capacity_events(P: np.ndarray, s: Scenario, cfg: PlannerConfig, capacity: int, start_load: int,
                    targets: Sequence[int] | None = None, start: int = 0):
    """Counter trace of one UAV from its dwells.

    An installation is counted the first time the UAV completes a full
    installation dwell in a target; a full refill dwell resets the count.
    """
    N = P.shape[0] - 1
    targets = range(len(s.targets)) if targets is None else targets
    events = []  # (sample, order, kind, name)
    for t in targets:
        for a, length in runs(inside(P[start:], s.targets[t])):
            if length >= cfg.n_ins + 1:
                events.append((start + a + cfg.n_ins, 0, "install", s.targets[t].name or f"T{t + 1}"))
                break
    for r, box in enumerate(s.refills):
        for a, length in runs(inside(P[start:], box)):
            if length >= cfg.n_rs + 1:
                events.append((start + a + cfg.n_rs, 1, "refill", box.name or f"R{r + 1}"))
    events.sort()
    trace = np.empty(N + 1, dtype=int)
    load = start_load
    log = []
    last = 0
    for k, _, kind, name in events:
        trace[last:k] = load
        load = load - 1 if kind == "install" else capacity
        log.append((k * cfg.T_s, f"{kind}:{name}", load))
        last = k
    trace[last:] = load
    return trace, log


def validate_bundle(bundle: SignalBundle, s: Scenario, cfg: PlannerConfig, *, start: int = 0,
                    uav_ids: Sequence[str] | None = None, targets: Sequence[int] | None = None,
                    loads: dict[str, int] | None = None) -> ValidationReport:
    """Check every mission requirement on raw samples from ``start`` to the end.

    ``uav_ids`` restricts the checked fleet; ``targets`` lists the targets
    that must be installed inside the window; ``loads`` gives initial payloads.
    """
    if bundle.N != cfg.N:
        raise GridMismatch(f"trajectories have {bundle.N + 1} samples, the configuration expects {cfg.N + 1}")
    if abs(bundle.T_s - cfg.T_s) > 1e-12:
        raise GridMismatch(f"sampling period {bundle.T_s} differs from the configured {cfg.T_s}")
    ids = list(uav_ids) if uav_ids is not None else bundle.ids
    targets = list(range(len(s.targets))) if targets is None else list(targets)
    caps = {u.id: u.capacity for u in s.fleet}
    loads = dict(loads or {})
    rep = ValidationReport()
    trajs = [bundle[u] for u in ids]
    Ps = [tr.p[start:] for tr in trajs]

    ws = min(float(box_margins(P, s.workspace).min()) for P in Ps)
    rep.add("workspace_min_margin", ws, ws > 0)
    if s.obstacles:
        clear = min(float((-box_margins(P, o)).min()) for P in Ps for o in s.obstacles)
    else:
        clear = math.inf
    rep.add("obstacle_clearance", clear, clear > 0)
    if len(ids) > 1:
        dmin = math.inf
        for i in range(len(ids)):
            for j in range(i + 1, len(ids)):
                dmin = min(dmin, float(np.linalg.norm(Ps[i] - Ps[j], axis=1).min()))
        rep.add("min_pair_distance", dmin, dmin > cfg.Gamma, f"gamma={cfg.Gamma}")
        rep.add("pair_distance_margin", dmin - cfg.Gamma, dmin - cfg.Gamma > 0)
    for j in range(3):
        vm = max(float(np.abs(tr.v[start:, j]).max()) for tr in trajs)
        rep.add(f"max_abs_v{j + 1}", vm, vm <= cfg.v_max + BOUND_TOL, f"bound={cfg.v_max}")
    for j in range(3):
        seg = [np.abs(tr.a[start:, j]) for tr in trajs if tr.a[start:].size]
        am = max((float(x.max()) for x in seg), default=0.0)
        rep.add(f"max_abs_a{j + 1}", am, am <= cfg.a_max + BOUND_TOL, f"bound={cfg.a_max}")

    for t in targets:
        box = s.targets[t]
        best, who = 0, "-"
        for u, P in zip(ids, Ps):
            n, _ = longest_run(inside(P, box))
            if n > best:
                best, who = n, u
        dwell = max(best - 1, 0) * cfg.T_s
        rep.add(f"dwell[{box.name or f'T{t + 1}'}]", dwell, dwell >= cfg.t_ins - 1e-9, f"by={who}")

    for u, tr in zip(ids, trajs):
        cap = caps.get(u, loads.get(u, 0))
        trace, log = capacity_events(tr.p, s, cfg, cap, loads.get(u, cap), targets, start)
        rep.capacity_trace[u] = trace
        rep.capacity_log[u] = log
        low = int(trace[start:].min())
        events = ";".join(f"{t:.2f}s:{name}->{c}" for t, name, c in log)
        rep.add(f"capacity_min[{u}]", low, low >= 0, f"events={events or 'none'}")

    for u, tr in zip(ids, trajs):
        home = [b.name or f"R{i + 1}" for i, b in enumerate(s.refills) if inside(tr.p[-1:], b)[0]]
        rep.add(f"terminal_refill[{u}]", home[0] if home else "none", bool(home))

    from .optimizer import dynamics_residual
    res = dynamics_residual(SignalBundle(tuple(trajs), bundle.T_s))
    rep.add("dynamics_residual", res, res <= DYN_TOL)

    phi = build_mission_formula(s, cfg, start=start, uav_ids=ids, targets=targets)
    sig = (np.stack([tr.p for tr in trajs]), ids)
    rho = robustness_exact(phi, sig, 0)
    rep.add("rho_exact", rho, rho > 0)
    rep.add("rho_smooth", robustness_smooth(phi, sig, 0, cfg.lam), None, f"lambda={cfg.lam}")
    return rep
