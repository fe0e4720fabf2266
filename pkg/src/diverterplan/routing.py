"""Target assignment and refill routing on the depot/target/refill multigraph.

Vertices are numbered targets first, then refill stations, then one depot per
UAV. Edge weights are Euclidean distances between region centers and are the
same for every UAV, so the weight tensor ``w[i][j][d]`` is stored as a single
matrix. A UAV's route is a walk ``depot -> target ... -> refill`` in which no
two refills are adjacent and every run of targets between stops carries at
most the UAV's payload.

The objective is the total distance plus, for every UAV pair, the slack
``sigma = |dist_r - dist_p|`` which must not exceed ``sigma_bar``.
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .scenario import PlannerConfig, Scenario

TOL = 1e-9


class RoutingInfeasible(RuntimeError):
    def __init__(self, family: str, detail: str = ""):
        self.family = family
        msg = f"routing infeasible: {family}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class InstanceTooLarge(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class RoutingGraph:
    points: np.ndarray  # (V, 3) vertex positions
    n_targets: int
    n_refills: int
    capacities: tuple[int, ...]
    uav_ids: tuple[str, ...]
    initial_loads: tuple[int, ...] = ()
    names: tuple[str, ...] = ()

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "capacities", tuple(int(c) for c in self.capacities))
        object.__setattr__(self, "uav_ids", tuple(self.uav_ids))
        if not self.initial_loads:
            object.__setattr__(self, "initial_loads", self.capacities)
        if len(self.initial_loads) != len(self.capacities):
            raise ValueError("one initial load per UAV is required")
        if pts.shape != (self.n_targets + self.n_refills + len(self.capacities), 3):
            raise ValueError("points must list targets, refills, then one depot per UAV")
        diff = pts[:, None, :] - pts[None, :, :]
        dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        dist.flags.writeable = False
        object.__setattr__(self, "dist", dist)

    @classmethod
    def from_points(cls, targets, refills, depots, capacities, uav_ids=None, initial_loads=()):
        pts = np.vstack([np.reshape(targets, (-1, 3)), np.reshape(refills, (-1, 3)),
                         np.reshape(depots, (-1, 3))])
        ids = uav_ids or tuple(f"UAV{i + 1}" for i in range(len(capacities)))
        return cls(pts, len(targets), len(refills), tuple(capacities), tuple(ids),
                   tuple(initial_loads))

    @property
    def n_uavs(self) -> int:
        return len(self.capacities)

    @property
    def n_vertices(self) -> int:
        return self.points.shape[0]

    @property
    def weights(self) -> np.ndarray:
        """Full ``w[i, j, d]`` tensor."""
        return np.repeat(self.dist[:, :, None], self.n_uavs, axis=2)

    @property
    def demand(self) -> np.ndarray:
        return np.ones(self.n_targets, dtype=int)

    def kind(self, v: int) -> str:
        if v < self.n_targets:
            return "target"
        if v < self.n_targets + self.n_refills:
            return "refill"
        return "depot"

    def refill_vertex(self, r: int) -> int:
        return self.n_targets + r

    def depot_vertex(self, d: int) -> int:
        return self.n_targets + self.n_refills + d

    def edge_allowed(self, i: int, j: int, d: int) -> bool:
        if i == j:
            return False
        ki, kj = self.kind(i), self.kind(j)
        if "target" not in (ki, kj):
            return False  # depot-depot, depot-refill, refill-refill
        for v, k in ((i, ki), (j, kj)):
            if k == "depot" and v != self.depot_vertex(d):
                return False
        return True

    def max_multiplicity(self, i: int, j: int) -> int:
        kinds = {self.kind(i), self.kind(j)}
        return 2 if kinds == {"target", "refill"} else 1


def build_graph(s: Scenario, initial_loads: Sequence[int] = ()) -> RoutingGraph:
    pts = [b.center for b in s.targets] + [b.center for b in s.refills] + [u.depot for u in s.fleet]
    names = tuple([b.name or f"T{i + 1}" for i, b in enumerate(s.targets)]
                  + [b.name or f"R{i + 1}" for i, b in enumerate(s.refills)]
                  + [f"depot:{u.id}" for u in s.fleet])
    return RoutingGraph(np.array(pts), len(s.targets), len(s.refills),
                        tuple(u.capacity for u in s.fleet), tuple(u.id for u in s.fleet),
                        tuple(initial_loads), names)


def lower_bound_h(subset: Sequence[int], graph: RoutingGraph) -> int:
    """Minimum number of trips needed to serve ``subset``, using the largest capacity."""
    subset = list(subset)
    if not subset:
        raise ValueError("h is defined for nonempty target sets only")
    total = int(np.sum(graph.demand[subset]))
    return -(-total // max(graph.capacities))


@dataclass(frozen=True, eq=False)
class RoutingSolution:
    z: np.ndarray  # (V, V, δ) edge multiplicities, symmetric
    y: np.ndarray  # (τ, δ) target-to-UAV indicator
    sigma: np.ndarray  # (δ, δ) pairwise slack, upper triangle used
    routes: tuple[tuple[int, ...], ...]
    distances: tuple[float, ...]
    objective: float
    nodes_explored: int = 0
    proven_optimal: bool = True

    def targets_of(self, d: int, graph: RoutingGraph) -> list[int]:
        return [v for v in self.routes[d] if graph.kind(v) == "target"]


def objective_value(distances: Sequence[float]) -> float:
    L = list(distances)
    return float(sum(L) + sum(abs(a - b) for a, b in itertools.combinations(L, 2)))


def route_length(route: Sequence[int], graph: RoutingGraph) -> float:
    return float(sum(graph.dist[a, b] for a, b in zip(route, route[1:])))


def solution_from_routes(graph: RoutingGraph, routes: Sequence[Sequence[int]], *,
                         nodes_explored=0, proven_optimal=True) -> RoutingSolution:
    V, D, T = graph.n_vertices, graph.n_uavs, graph.n_targets
    z = np.zeros((V, V, D), dtype=int)
    y = np.zeros((T, D), dtype=int)
    for d, route in enumerate(routes):
        for a, b in zip(route, route[1:]):
            z[a, b, d] += 1
            z[b, a, d] += 1
        for v in route:
            if v < T:
                y[v, d] = 1
    dist = tuple(route_length(r, graph) for r in routes)
    sigma = np.zeros((D, D))
    for r, p in itertools.combinations(range(D), 2):
        sigma[r, p] = abs(dist[r] - dist[p])
    return RoutingSolution(z, y, sigma, tuple(tuple(int(v) for v in r) for r in routes), dist,
                           objective_value(dist), nodes_explored, proven_optimal)


# ---------------------------------------------------------------- B&B


class _Bounds:
    """Static pieces of the node lower bound."""

    def __init__(self, g: RoutingGraph):
        T, R = g.n_targets, g.n_refills
        D = g.dist
        self.refills = [g.refill_vertex(r) for r in range(R)]
        self.depots = [g.depot_vertex(d) for d in range(g.n_uavs)]
        self.to_refill = np.array([D[v, self.refills].min() for v in range(g.n_vertices)])
        # cheapest pair of incident edge shares for each target; a target-target
        # edge is split between its endpoints, refill and depot edges are not
        c = np.zeros(T)
        for j in range(T):
            cand = [D[j, t] / 2 for t in range(T) if t != j]
            cand += [D[j, r] for r in self.refills] * 2
            cand += [D[j, dp] for dp in self.depots]
            cand.sort()
            c[j] = cand[0] + cand[1]
        self.c = c
        # cheapest single-target trip from each depot
        self.trip = np.array([[D[dp, t] + self.to_refill[t] for t in range(T)] for dp in self.depots])


def _unserved(mask: int, T: int):
    return [t for t in range(T) if not mask >> t & 1]


def solve_routing(graph: RoutingGraph, cfg: PlannerConfig, *, node_limit: int | None = None) -> RoutingSolution:
    """Best-first branch-and-bound over walk extensions.

    Each branch fixes the next edge of the UAV currently being routed (UAVs
    in index order, candidate vertices in index order), so every candidate
    is a connected walk. Capacity and connectivity cuts are applied to
    partial walks as they are built. The bound is
    ``max(δ * max_d ℓ_d, committed + Σ_j c_j + tip)`` where ``ℓ_d`` bounds
    each UAV's final distance and ``c_j`` is the cheapest pair of incident
    edge shares of each unserved target.
    """
    g = graph
    T, Dn = g.n_targets, g.n_uavs
    dist = g.dist
    sbar = cfg.sigma_bar
    if T < Dn:
        raise RoutingInfeasible("depot departure",
                                f"{Dn} UAVs must each serve a target but only {T} targets exist")
    if any(c < 1 for c in g.capacities):
        raise RoutingInfeasible("capacity", "every UAV needs a capacity of at least one")
    B = _Bounds(g)
    full = (1 << T) - 1
    counter = itertools.count()
    incumbent = math.inf
    best = None
    explored = 0

    # node: (mask, d, v, load, ntarg, partial, completed(tuple), parent, vertex)
    def bound(mask, d, v, partial, ntarg, completed):
        un = _unserved(mask, T)
        csum = float(B.c[un].sum()) if un else 0.0
        kind = g.kind(v)
        if kind == "target":
            tip = B.to_refill[v]
            tip_share = min([dist[v, t] / 2 for t in un] + [tip])
            cur = partial + tip
        elif kind == "refill":
            tip_share = 0.0
            cur = partial
        else:
            tip_share = 0.0
            cur = partial + (min(B.trip[d][t] for t in un) if un else math.inf)
        future = []
        for e in range(d + 1, Dn):
            future.append(min(B.trip[e][t] for t in un) if un else math.inf)
        lmax = max([cur] + list(completed) + future)
        total = sum(completed) + partial + csum + tip_share
        lb = max(Dn * lmax, total)
        if completed:
            lo = min(completed)
            if cur > lo + sbar + TOL:
                return math.inf
            if future and max(future) > lo + sbar + TOL:
                return math.inf
            # remaining work must fit under the balance ceiling
            if partial + csum + tip_share > (Dn - d) * (lo + sbar) + TOL:
                return math.inf
        return lb

    def push(heap, key, node):
        heapq.heappush(heap, (key, next(counter), node))

    heap: list = []
    start = (0, 0, g.depot_vertex(0), g.initial_loads[0], 0, 0.0, (), None, g.depot_vertex(0))
    lb0 = bound(0, 0, g.depot_vertex(0), 0.0, 0, ())
    if math.isfinite(lb0):
        push(heap, lb0, start)

    def routes_of(node):
        verts = []
        n = node
        while n is not None:
            verts.append(n[8])
            n = n[7]
        verts.reverse()
        routes = []
        for v in verts:
            if g.kind(v) == "depot":
                routes.append([v])
            else:
                routes[-1].append(v)
        return routes

    while heap:
        key, _, node = heapq.heappop(heap)
        if key >= incumbent - TOL:
            break
        mask, d, v, load, ntarg, partial, completed, parent, _ = node
        explored += 1
        if node_limit is not None and explored > node_limit and best is not None:
            break
        kind = g.kind(v)
        un = _unserved(mask, T)
        # extend to an unserved target
        if load > 0:
            for t in un:
                nmask = mask | (1 << t)
                np_ = partial + dist[v, t]
                # the last UAV cannot leave targets to nobody; others keep one for each later UAV
                if T - bin(nmask).count("1") < (Dn - d - 1):
                    continue
                lb = bound(nmask, d, t, np_, ntarg + 1, completed)
                if lb < incumbent - TOL:
                    push(heap, lb, (nmask, d, t, load - 1, ntarg + 1, np_, completed, node, t))
        if kind == "target":
            cap = g.capacities[d]
            for r in B.refills:
                np_ = partial + dist[v, r]
                lb = bound(mask, d, r, np_, ntarg, completed)
                if lb < incumbent - TOL:
                    push(heap, lb, (mask, d, r, cap, ntarg, np_, completed, node, r))
        elif kind == "refill" and ntarg > 0:
            # finish this UAV here
            L = partial
            if any(abs(L - c) > sbar + TOL for c in completed):
                continue
            done = completed + (L,)
            if d == Dn - 1:
                if mask != full:
                    continue
                obj = objective_value(done)
                if obj < incumbent - TOL:
                    incumbent = obj
                    best = node
                continue
            nd = d + 1
            if T - bin(mask).count("1") < Dn - nd:
                continue
            dep = g.depot_vertex(nd)
            lb = bound(mask, nd, dep, 0.0, 0, done)
            if lb < incumbent - TOL:
                push(heap, lb, (mask, nd, dep, g.initial_loads[nd], 0, 0.0, done, node, dep))

    if best is None:
        _diagnose_infeasible(graph, cfg)
    proven = not (node_limit is not None and explored > node_limit)
    return solution_from_routes(graph, routes_of(best), nodes_explored=explored, proven_optimal=proven)


def _diagnose_infeasible(graph: RoutingGraph, cfg: PlannerConfig):
    if math.isfinite(cfg.sigma_bar):
        relaxed = cfg.with_(sigma_bar=1e12)
        try:
            solve_routing(graph, relaxed)
        except RoutingInfeasible:
            pass
        else:
            raise RoutingInfeasible(
                "distance balance",
                f"no assignment keeps every pairwise distance difference within sigma_bar={cfg.sigma_bar}",
            )
    raise RoutingInfeasible("capacity", "no walk structure serves every target")


# ---------------------------------------------------------------- brute force


def _capacity_ok(k: int, refill_after: Sequence[bool], first_load: int, cap: int) -> bool:
    run, limit = 0, first_load
    for i in range(k):
        run += 1
        if run > limit:
            return False
        if i < k - 1 and refill_after[i]:
            run, limit = 0, cap
    return True


def _walk_lengths(graph: RoutingGraph, d: int, subset: tuple[int, ...]):
    """Every feasible walk length for UAV ``d`` serving exactly ``subset``.

    Yields ``(perm, lengths, choices)`` batches where ``choices`` indexes the
    gap/terminal refill options of each length.
    """
    D = graph.dist
    k = len(subset)
    R = graph.n_refills
    refills = [graph.refill_vertex(r) for r in range(R)]
    depot = graph.depot_vertex(d)
    cap, first = graph.capacities[d], graph.initial_loads[d]
    shape = (R + 1,) * (k - 1)
    feasible = np.zeros(shape, dtype=bool)
    for idx in itertools.product(range(R + 1), repeat=k - 1):
        feasible[idx] = _capacity_ok(k, [c > 0 for c in idx], first, cap)
    feasible = feasible.reshape(-1)
    for perm in itertools.permutations(subset):
        total = np.array([D[depot, perm[0]]])
        for a, b in zip(perm, perm[1:]):
            opts = np.array([D[a, b]] + [D[a, r] + D[r, b] for r in refills])
            total = np.add.outer(total, opts).reshape(-1)
        total = total[feasible]
        choice_ids = np.flatnonzero(feasible)
        ends = np.array([D[perm[-1], r] for r in refills])
        lengths = np.add.outer(total, ends).reshape(-1)
        yield perm, lengths, choice_ids


def _decode_walk(graph, d, perm, choice_id, end, k):
    R = graph.n_refills
    digits = []
    for _ in range(k - 1):
        digits.append(choice_id % (R + 1))
        choice_id //= R + 1
    digits.reverse()
    route = [graph.depot_vertex(d), perm[0]]
    for i, b in enumerate(perm[1:]):
        if digits[i] > 0:
            route.append(graph.refill_vertex(digits[i] - 1))
        route.append(b)
    route.append(graph.refill_vertex(end))
    return route


def _length_set(graph, d, subset):
    parts = [lengths for _, lengths, _ in _walk_lengths(graph, d, subset)]
    return np.unique(np.concatenate(parts)) if parts else np.array([])


def _find_walk(graph, d, subset, length):
    R = graph.n_refills
    for perm, lengths, choice_ids in _walk_lengths(graph, d, subset):
        hit = np.flatnonzero(np.abs(lengths - length) <= TOL)
        if hit.size:
            i = int(hit[0])
            return _decode_walk(graph, d, perm, int(choice_ids[i // R]), i % R, len(subset))
    raise AssertionError("walk length not reproducible")


def brute_force_routing(graph: RoutingGraph, cfg: PlannerConfig) -> RoutingSolution:
    """Exhaustive reference solver for tiny instances (τ <= 7, δ <= 2)."""
    T, Dn = graph.n_targets, graph.n_uavs
    if T > 7 or Dn > 2:
        raise InstanceTooLarge(f"brute force is limited to 7 targets and 2 UAVs (got {T}, {Dn})")
    sbar = cfg.sigma_bar
    best = (math.inf, None)
    cache = {}

    def lengths(d, subset):
        key = (d, subset)
        if key not in cache:
            cache[key] = _length_set(graph, d, subset)
        return cache[key]

    for labels in itertools.product(range(Dn), repeat=T):
        groups = [tuple(t for t in range(T) if labels[t] == d) for d in range(Dn)]
        if any(not grp for grp in groups):
            continue
        if Dn == 1:
            A = lengths(0, groups[0])
            if A.size and A[0] < best[0] - TOL:
                best = (float(A[0]), (groups, (float(A[0]),)))
            continue
        A1, A2 = lengths(0, groups[0]), lengths(1, groups[1])
        if not A1.size or not A2.size:
            continue
        obj, pair = _best_pair(A1, A2, sbar)
        if obj < best[0] - TOL:
            best = (obj, (groups, pair))
    if best[1] is None:
        raise RoutingInfeasible("distance balance" if Dn > 1 else "capacity",
                                "exhaustive search found no feasible walk set")
    groups, Ls = best[1]
    routes = [_find_walk(graph, d, groups[d], Ls[d]) for d in range(Dn)]
    return solution_from_routes(graph, routes)


def _best_pair(A1, A2, sbar):
    """min of L1 + L2 + |L1 - L2| over sorted length sets with |L1 - L2| <= sbar."""
    best, pair = math.inf, None
    for A, Bv, flip in ((A1, A2, False), (A2, A1, True)):
        # partner no longer than L and within sbar below it: objective 2 L
        idx = np.searchsorted(Bv, A + TOL, side="right") - 1
        ok = idx >= 0
        ok[ok] &= Bv[idx[ok]] >= A[ok] - sbar - TOL
        if np.any(ok):
            i = int(np.flatnonzero(ok)[0])
            obj = float(A[i] + Bv[idx[i]] + abs(A[i] - Bv[idx[i]]))
            if obj < best - TOL:
                best = obj
                pair = (float(Bv[idx[i]]), float(A[i])) if flip else (float(A[i]), float(Bv[idx[i]]))
    return best, pair


# ---------------------------------------------------------------- checking


def _components(adj: dict[int, set[int]]):
    seen, comps = set(), []
    for s in adj:
        if s in seen:
            continue
        stack, comp = [s], set()
        while stack:
            u = stack.pop()
            if u in comp:
                continue
            comp.add(u)
            stack.extend(adj[u] - comp)
        seen |= comp
        comps.append(comp)
    return comps


def _chains(g: RoutingGraph, z_d: np.ndarray) -> list[list[int]]:
    """Maximal target runs of one UAV's support, bounded by refills or the depot."""
    T = g.n_targets
    chains, seen = [], set()
    for t in range(T):
        if t in seen or z_d[t].sum() == 0:
            continue
        # walk both directions along target-target edges
        chain = [t]
        seen.add(t)
        for direction in (0, 1):
            cur = t
            while True:
                nxt = [u for u in range(T) if z_d[cur, u] > 0 and u not in seen]
                if not nxt:
                    break
                cur = nxt[0]
                seen.add(cur)
                if direction == 0:
                    chain.append(cur)
                else:
                    chain.insert(0, cur)
        chains.append(chain)
    return chains


def check_routing_feasibility(sol: RoutingSolution, graph: RoutingGraph, cfg: PlannerConfig) -> list[str]:
    """Independent constraint check of a routing solution; empty when feasible."""
    g = graph
    T, Dn, V = g.n_targets, g.n_uavs, g.n_vertices
    z = np.asarray(sol.z)
    diags: list[str] = []
    if z.shape != (V, V, Dn):
        return [f"z has shape {z.shape}, expected {(V, V, Dn)}"]
    if not np.array_equal(z, z.transpose(1, 0, 2)):
        diags.append("z is not symmetric")
    for d in range(Dn):
        for i in range(V):
            for j in range(i + 1, V):
                m = z[i, j, d]
                if m == 0:
                    continue
                if m < 0 or not g.edge_allowed(i, j, d):
                    diags.append(f"UAV {g.uav_ids[d]} uses forbidden edge {i}-{j}")
                elif m > g.max_multiplicity(i, j):
                    diags.append(f"UAV {g.uav_ids[d]} edge {i}-{j} multiplicity {m} above its bound")
    for j in range(T):
        deg = int(z[j, :, :].sum())
        if deg != 2:
            diags.append(f"target {j} has total degree {deg}, must be visited exactly once")
        for d in range(Dn):
            dd = int(z[j, :, d].sum())
            if dd != 2 * int(sol.y[j, d]) or sol.y[j, d] not in (0, 1):
                diags.append(f"target {j} degree {dd} for UAV {g.uav_ids[d]} disagrees with y")
    dist = []
    for d in range(Dn):
        dep = g.depot_vertex(d)
        out = int(z[dep, :T, d].sum())
        if out != 1:
            diags.append(f"UAV {g.uav_ids[d]} leaves its depot {out} times, must be exactly once")
        zd = z[:, :, d]
        adj = {v: set(np.flatnonzero(zd[v] > 0).tolist()) for v in range(V) if zd[v].sum() > 0}
        if adj:
            for comp in _components(adj):
                if dep not in comp:
                    tg = sorted(v for v in comp if v < T)
                    diags.append(f"UAV {g.uav_ids[d]} subtour on targets {tg} is disconnected from its depot")
            deg = zd.sum(axis=1)
            odd = [v for v in range(V) if deg[v] % 2 == 1]
            odd_refills = [v for v in odd if g.kind(v) == "refill"]
            if dep in adj and (len(odd_refills) != 1 or len(odd) != 2):
                diags.append(f"UAV {g.uav_ids[d]} support is not a single walk from its depot to a refill")
        for chain in _chains(g, zd):
            ends = set()
            for end in (chain[0], chain[-1]):
                ends |= {u for u in range(T, V) if zd[end, u] > 0}
            limit = g.initial_loads[d] if dep in ends else g.capacities[d]
            if len(chain) > limit:
                diags.append(f"UAV {g.uav_ids[d]} serves {len(chain)} targets {chain} between stops, "
                             f"capacity {limit}")
            boundary = sum(int(z[i, j, :].sum()) for i in chain for j in range(V) if j not in chain)
            if boundary < 2 * lower_bound_h(chain, g):
                diags.append(f"capacity cut violated on targets {chain}")
        dist.append(float(np.sum(np.triu(zd * g.dist))))
    for r, p in itertools.combinations(range(Dn), 2):
        diff = abs(dist[r] - dist[p])
        if diff > cfg.sigma_bar + TOL:
            diags.append(f"distance difference {diff:.6g} m between {g.uav_ids[r]} and "
                         f"{g.uav_ids[p]} exceeds sigma_bar={cfg.sigma_bar}")
        s_rp = float(sol.sigma[r, p])
        if s_rp < diff - TOL or s_rp < -TOL or s_rp > cfg.sigma_bar + TOL:
            diags.append(f"sigma[{r},{p}]={s_rp:.6g} does not bound the distance difference {diff:.6g}")
    expected = sum(dist) + sum(float(sol.sigma[r, p]) for r, p in itertools.combinations(range(Dn), 2))
    if abs(expected - sol.objective) > 1e-6:
        diags.append(f"objective {sol.objective} does not match edge weights plus slacks {expected}")
    for d, route in enumerate(sol.routes):
        if not route or route[0] != g.depot_vertex(d):
            diags.append(f"route of {g.uav_ids[d]} does not start at its depot")
        elif len(route) > 1 and g.kind(route[-1]) != "refill":
            diags.append(f"route of {g.uav_ids[d]} does not end at a refill")
    return diags


def segments_of(route: Sequence[int], graph: RoutingGraph) -> list[list[int]]:
    """Target runs between consecutive stops of a route."""
    segs, cur = [], []
    for v in route[1:]:
        if graph.kind(v) == "target":
            cur.append(v)
        else:
            segs.append(cur)
            cur = []
    if cur:
        segs.append(cur)
    return segs
