"""Signal temporal logic over fleet position signals.

Formulas are trees of frozen dataclasses. Every node is evaluated as a whole
signal over the sample indices where it is defined, so a node with future
reach ``h`` yields ``N + 1 - h`` values. Two semantics share one recursion:
``exact`` (true min/max) and ``smooth`` (log-sum-exp min, softmax-weighted
max). The smooth pass can also run backwards to give gradients with respect
to positions, which :func:`smooth_gradient` chains through the dynamics.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .scenario import Box3, PlannerConfig, Scenario, SignalBundle

# regularizer for the pair distance norm in smooth evaluation (m)
PAIR_EPS = 1e-9


class OutOfHorizonError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


# ------------------------------------------------------------ primitives


def box_margin(point, box: Box3) -> float:
    """Signed containment margin: the smallest of the six face distances."""
    p = np.asarray(point, dtype=float)
    return float(min(np.min(box.hi - p), np.min(p - box.lo)))


def _check_values(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ValueError("smooth min/max of an empty list is undefined")
    return arr


def smooth_min(values, lam: float) -> float:
    """``-(1/lam) * log(sum(exp(-lam * v)))``, shifted by the minimum for stability."""
    v = _check_values(values)
    m = v.min()
    return float(m - np.log(np.sum(np.exp(-lam * (v - m)))) / lam)


def smooth_max(values, lam: float) -> float:
    """Softmax-weighted average ``sum(v * exp(lam v)) / sum(exp(lam v))``."""
    v = _check_values(values)
    m = v.max()
    e = np.exp(lam * (v - m))
    return float(np.sum(v * e) / np.sum(e))


def _smin_rows(X: np.ndarray, lam: float):
    m = X.min(axis=-1, keepdims=True)
    e = np.exp(-lam * (X - m))
    S = e.sum(axis=-1, keepdims=True)
    val = m[..., 0] - np.log(S[..., 0]) / lam
    return val, e / S


def _smax_rows(X: np.ndarray, lam: float):
    m = X.max(axis=-1, keepdims=True)
    e = np.exp(lam * (X - m))
    w = e / e.sum(axis=-1, keepdims=True)
    val = np.sum(w * X, axis=-1)
    dval = w * (1.0 + lam * (X - val[..., None]))
    return val, dval


# ------------------------------------------------------------ evaluation


class _Ctx:
    def __init__(self, P: np.ndarray, index: dict, smooth: bool, lam: float, grad: bool):
        self.P = P
        self.index = index
        self.smooth = smooth
        self.lam = lam
        self.grad = grad
        self.gP = np.zeros_like(P) if grad else None

    def reduce_min(self, X):
        """Min over the last axis; returns (values, backward weights or None)."""
        if self.smooth:
            return _smin_rows(X, self.lam)
        return X.min(axis=-1), None

    def reduce_max(self, X):
        if self.smooth:
            return _smax_rows(X, self.lam)
        return X.max(axis=-1), None


Backward = Callable[[np.ndarray], None]


def _noop(g):
    return None


class Formula:
    """Base class of formula nodes."""

    def horizon(self) -> int:
        raise NotImplementedError

    def children(self) -> tuple["Formula", ...]:
        return ()

    def _eval(self, ctx: _Ctx) -> tuple[np.ndarray, Backward]:
        raise NotImplementedError

    def walk(self):
        yield self
        for c in self.children():
            yield from c.walk()


def _uav_signal(ctx, uav):
    try:
        return ctx.index[uav]
    except KeyError:
        raise KeyError(f"formula refers to unknown UAV {uav!r}") from None


def _box_faces(P_u: np.ndarray, box: Box3) -> np.ndarray:
    return np.concatenate([box.hi - P_u, P_u - box.lo], axis=1)


def _box_eval(ctx, uav, box, sign):
    i = _uav_signal(ctx, uav)
    faces = _box_faces(ctx.P[i], box)
    val, w = ctx.reduce_min(faces)
    if not ctx.grad:
        return sign * val, _noop

    def back(g):
        gw = (sign * g)[:, None] * w
        ctx.gP[i] += gw[:, 3:] - gw[:, :3]

    return sign * val, back


@dataclass(frozen=True, eq=False)
class InBox(Formula):
    uav: str
    box: Box3

    def horizon(self):
        return 0

    def _eval(self, ctx):
        return _box_eval(ctx, self.uav, self.box, 1.0)


@dataclass(frozen=True, eq=False)
class OutBox(Formula):
    uav: str
    box: Box3

    def horizon(self):
        return 0

    def _eval(self, ctx):
        return _box_eval(ctx, self.uav, self.box, -1.0)


@dataclass(frozen=True, eq=False)
class PairDist(Formula):
    uav_n: str
    uav_m: str
    gamma: float

    def __post_init__(self):
        if self.uav_n == self.uav_m:
            raise ValueError("PairDist needs two distinct UAVs")

    def horizon(self):
        return 0

    def _eval(self, ctx):
        i, j = _uav_signal(ctx, self.uav_n), _uav_signal(ctx, self.uav_m)
        d = ctx.P[i] - ctx.P[j]
        sq = np.einsum("kj,kj->k", d, d)
        if ctx.smooth:
            dist = np.sqrt(sq + PAIR_EPS**2)
        else:
            dist = np.sqrt(sq)
        val = dist - self.gamma
        if not ctx.grad:
            return val, _noop

        def back(g):
            gd = (g / dist)[:, None] * d
            ctx.gP[i] += gd
            ctx.gP[j] -= gd

        return val, back


@dataclass(frozen=True, eq=False)
class Not(Formula):
    child: Formula

    def horizon(self):
        return self.child.horizon()

    def children(self):
        return (self.child,)

    def _eval(self, ctx):
        val, cb = self.child._eval(ctx)
        return -val, (lambda g: cb(-g))


class _Junction(Formula):
    args: tuple

    def horizon(self):
        return max(c.horizon() for c in self.args)

    def children(self):
        return tuple(self.args)

    def _eval(self, ctx):
        evals = [c._eval(ctx) for c in self.args]
        L = min(v.shape[0] for v, _ in evals)
        X = np.stack([v[:L] for v, _ in evals], axis=1)
        val, w = self._reduce(ctx, X)
        if not ctx.grad:
            return val, _noop

        def back(g):
            G = g[:, None] * w
            for col, (v, cb) in enumerate(evals):
                full = np.zeros(v.shape[0])
                full[:L] = G[:, col]
                cb(full)

        return val, back


@dataclass(frozen=True, eq=False)
class And(_Junction):
    args: tuple

    def __init__(self, *args):
        if len(args) == 1 and not isinstance(args[0], Formula):
            args = tuple(args[0])
        if not args:
            raise ValueError("And needs at least one argument")
        object.__setattr__(self, "args", tuple(args))

    def _reduce(self, ctx, X):
        return ctx.reduce_min(X)


@dataclass(frozen=True, eq=False)
class Or(_Junction):
    args: tuple

    def __init__(self, *args):
        if len(args) == 1 and not isinstance(args[0], Formula):
            args = tuple(args[0])
        if not args:
            raise ValueError("Or needs at least one argument")
        object.__setattr__(self, "args", tuple(args))

    def _reduce(self, ctx, X):
        return ctx.reduce_max(X)


def _check_interval(lo, hi):
    if not (0 <= lo <= hi):
        raise ValueError(f"interval [{lo}, {hi}] must satisfy 0 <= lo <= hi")


class _Temporal(Formula):
    lo: int
    hi: int
    child: Formula

    def __post_init__(self):
        _check_interval(self.lo, self.hi)

    def horizon(self):
        return self.hi + self.child.horizon()

    def children(self):
        return (self.child,)

    def _eval(self, ctx):
        c, cb = self.child._eval(ctx)
        L = c.shape[0] - self.hi
        if L <= 0:
            raise OutOfHorizonError(
                f"interval [{self.lo}, {self.hi}] reaches beyond the signal horizon"
            )
        width = self.hi - self.lo + 1
        W = sliding_window_view(c, width)[self.lo:self.lo + L]
        val, w = self._reduce(ctx, W)
        if not ctx.grad:
            return val, _noop
        lo = self.lo

        def back(g):
            G = g[:, None] * w
            full = np.zeros(c.shape[0])
            for off in range(width):
                full[lo + off:lo + off + L] += G[:, off]
            cb(full)

        return val, back


@dataclass(frozen=True, eq=False)
class Always(_Temporal):
    lo: int
    hi: int
    child: Formula

    def _reduce(self, ctx, W):
        return ctx.reduce_min(W)


@dataclass(frozen=True, eq=False)
class Eventually(_Temporal):
    lo: int
    hi: int
    child: Formula

    def _reduce(self, ctx, W):
        return ctx.reduce_max(W)


@dataclass(frozen=True, eq=False)
class Until(Formula):
    """``left U[lo, hi] right``: max over t' of min(right(t'), min of left on [t, t'])."""

    lo: int
    hi: int
    left: Formula
    right: Formula

    def __post_init__(self):
        _check_interval(self.lo, self.hi)

    def horizon(self):
        return self.hi + max(self.left.horizon(), self.right.horizon())

    def children(self):
        return (self.left, self.right)

    def _eval(self, ctx):
        a, ab = self.left._eval(ctx)
        b, bb = self.right._eval(ctx)
        Lc = min(a.shape[0], b.shape[0])
        L = Lc - self.hi
        if L <= 0:
            raise OutOfHorizonError(
                f"interval [{self.lo}, {self.hi}] reaches beyond the signal horizon"
            )
        lam = ctx.lam
        cands = []
        tape = []
        if ctx.smooth:
            # running smooth min of the left signal as a log-sum-exp accumulator
            acc = -lam * a[0:L]
            for j in range(self.hi + 1):
                if j > 0:
                    acc = np.logaddexp(acc, -lam * a[j:j + L])
                if j >= self.lo:
                    run = -acc / lam
                    pair = np.stack([b[j:j + L], run], axis=1)
                    cand, wpair = _smin_rows(pair, lam)
                    cands.append(cand)
                    tape.append((j, run, wpair))
        else:
            run = a[0:L].copy()
            for j in range(self.hi + 1):
                if j > 0:
                    run = np.minimum(run, a[j:j + L])
                if j >= self.lo:
                    cands.append(np.minimum(b[j:j + L], run))
        C = np.stack(cands, axis=1)
        val, w = ctx.reduce_max(C)
        if not ctx.grad:
            return val, _noop

        def back(g):
            ga = np.zeros(a.shape[0])
            gb = np.zeros(b.shape[0])
            G = g[:, None] * w
            for col, (j, run, wpair) in enumerate(tape):
                gc = G[:, col]
                gb[j:j + L] += gc * wpair[:, 0]
                grun = gc * wpair[:, 1]
                # d run_j / d a[i] = softmin weight of a[i] within window [k, k+j]
                for i in range(j + 1):
                    ga[i:i + L] += grun * np.exp(-lam * (a[i:i + L] - run))
            ab(ga)
            bb(gb)

        return val, back


# ------------------------------------------------------------ public API


def _positions(sig) -> tuple[np.ndarray, dict]:
    if isinstance(sig, SignalBundle):
        P = sig.positions
        ids = sig.ids
    else:
        P, ids = sig
        P = np.asarray(P, dtype=float)
    return P, {uid: i for i, uid in enumerate(ids)}


def robustness_signal(phi: Formula, sig, smooth: bool = False, lam: float = 10.0) -> np.ndarray:
    """Robustness at every sample where ``phi`` is defined."""
    P, index = _positions(sig)
    ctx = _Ctx(P, index, smooth, lam, grad=False)
    val, _ = phi._eval(ctx)
    return val


def _at(values: np.ndarray, k: int, phi: Formula, N: int) -> float:
    if k < 0 or k >= values.shape[0]:
        raise OutOfHorizonError(
            f"sample {k} plus formula horizon {phi.horizon()} exceeds the grid end {N}"
        )
    return float(values[k])


def robustness_exact(phi: Formula, sig, k: int = 0) -> float:
    P, _ = _positions(sig)
    N = P.shape[1] - 1
    if k < 0 or k + phi.horizon() > N:
        raise OutOfHorizonError(
            f"sample {k} plus formula horizon {phi.horizon()} exceeds the grid end {N}"
        )
    return _at(robustness_signal(phi, sig, smooth=False), k, phi, N)


def robustness_smooth(phi: Formula, sig, k: int = 0, lam: float = 10.0) -> float:
    P, _ = _positions(sig)
    N = P.shape[1] - 1
    if k < 0 or k + phi.horizon() > N:
        raise OutOfHorizonError(
            f"sample {k} plus formula horizon {phi.horizon()} exceeds the grid end {N}"
        )
    return _at(robustness_signal(phi, sig, smooth=True, lam=lam), k, phi, N)


def smooth_value_and_position_grad(phi: Formula, P: np.ndarray, ids: Sequence[str],
                                   k: int, lam: float) -> tuple[float, np.ndarray]:
    """Smooth robustness at ``k`` and its gradient w.r.t. the (δ, N+1, 3) positions."""
    N = P.shape[1] - 1
    if k < 0 or k + phi.horizon() > N:
        raise OutOfHorizonError(
            f"sample {k} plus formula horizon {phi.horizon()} exceeds the grid end {N}"
        )
    ctx = _Ctx(np.asarray(P, dtype=float), {u: i for i, u in enumerate(ids)}, True, lam, grad=True)
    val, back = phi._eval(ctx)
    g = np.zeros(val.shape[0])
    g[k] = 1.0
    back(g)
    return float(val[k]), ctx.gP


def chain_to_accelerations(gP: np.ndarray, gV: np.ndarray | None, T_s: float) -> np.ndarray:
    """Pull state gradients back to the zero-order-hold accelerations.

    With ``v[i] = v0 + T_s sum_{k<i} a[k]`` and
    ``p[i] = p0 + i T_s v0 + T_s^2 sum_{k<i} (i - k - 1/2) a[k]``.
    """
    # S[j] = sum_{i >= j} gP[i]
    S = np.cumsum(gP[:, ::-1], axis=1)[:, ::-1]
    # sum_{i > k} (i - k) gP[i] = sum_{j > k} S[j]
    SS = np.cumsum(S[:, ::-1], axis=1)[:, ::-1]
    N = gP.shape[1] - 1
    lin = SS[:, 1:N + 1] - 0.5 * S[:, 1:N + 1]
    ga = T_s**2 * lin
    if gV is not None:
        SV = np.cumsum(gV[:, ::-1], axis=1)[:, ::-1]
        ga = ga + T_s * SV[:, 1:N + 1]
    return ga


def smooth_gradient(phi: Formula, sig: SignalBundle, k: int, lam: float,
                    decision: np.ndarray | None = None) -> np.ndarray:
    """Gradient of the smooth robustness w.r.t. every acceleration decision variable.

    Returned flattened in (uav, sample, axis) order, matching ``decision``.
    """
    P = sig.positions
    if decision is not None:
        decision = np.asarray(decision)
        expected = P.shape[0] * (P.shape[1] - 1) * 3
        if decision.size != expected:
            raise ValueError(
                f"decision vector has {decision.size} entries, bundle implies {expected}"
            )
    _, gP = smooth_value_and_position_grad(phi, P, sig.ids, k, lam)
    return chain_to_accelerations(gP, None, sig.T_s).reshape(-1)


# ------------------------------------------------------------ mission formula


def _conj(parts):
    return parts[0] if len(parts) == 1 else And(*parts)


def build_mission_formula(
    s: Scenario,
    cfg: PlannerConfig,
    assignment: dict[str, Sequence[int]] | None = None,
    *,
    start: int = 0,
    uav_ids: Sequence[str] | None = None,
    targets: Sequence[int] | None = None,
    refill_dwells: Sequence[tuple[str, int, int, int]] = (),
) -> Formula:
    """Conjunction of the safety, installation and mission-completion clauses.

    ``assignment`` maps a UAV id to the target indices it must install; a
    target left out of every list may be installed by any UAV. ``start``
    shifts every clause window to begin at that sample. ``refill_dwells``
    holds ``(uav, refill index, k_lo, k_hi)`` entries asking the UAV to sit a
    full refill time inside that station somewhere in ``[k_lo, k_hi]``.
    """
    N = cfg.N
    n_ins = cfg.n_ins
    n_rs = cfg.n_rs
    if cfg.t_ins >= cfg.t_N:
        raise ConfigurationError("installation time must be shorter than the mission")
    if not 0 <= start <= N - n_ins:
        raise ConfigurationError("clause window start leaves no room for an installation")
    uav_ids = list(uav_ids) if uav_ids is not None else [u.id for u in s.fleet]
    targets = list(range(len(s.targets))) if targets is None else list(targets)
    clauses: list[Formula] = []

    for u in uav_ids:
        stay = [InBox(u, s.workspace)] + [OutBox(u, o) for o in s.obstacles]
        clauses.append(Always(start, N, _conj(stay)))
    for a, b in combinations(uav_ids, 2):
        clauses.append(Always(start, N, PairDist(a, b, cfg.Gamma)))

    owner = {}
    if assignment:
        for u, tlist in assignment.items():
            for t in tlist:
                owner[t] = u
    for t in targets:
        box = s.targets[t]
        if t in owner:
            who = [owner[t]]
        else:
            who = uav_ids
        visits = [Eventually(start, N - n_ins, Always(0, n_ins, InBox(u, box))) for u in who]
        clauses.append(visits[0] if len(visits) == 1 else Or(*visits))

    for u, r, k_lo, k_hi in refill_dwells:
        k_hi = min(k_hi, N - n_rs)
        k_lo = max(0, min(k_lo, k_hi))
        clauses.append(Eventually(k_lo, k_hi, Always(0, n_rs, InBox(u, s.refills[r]))))

    for u in uav_ids:
        home = [InBox(u, r) for r in s.refills]
        clauses.append(Always(N, N, home[0] if len(home) == 1 else Or(*home)))
    return And(*clauses)


def safety_formula(s: Scenario, cfg: PlannerConfig, uav_ids: Sequence[str] | None = None) -> Formula:
    """Per-sample safety conjunction (workspace, obstacles, pair distance)."""
    uav_ids = list(uav_ids) if uav_ids is not None else [u.id for u in s.fleet]
    parts: list[Formula] = []
    for u in uav_ids:
        parts.append(InBox(u, s.workspace))
        parts.extend(OutBox(u, o) for o in s.obstacles)
    for a, b in combinations(uav_ids, 2):
        parts.append(PairDist(a, b, cfg.Gamma))
    return _conj(parts)


def max_aggregation_width(phi: Formula, N: int) -> int:
    """Largest number of arguments any single min/max in ``phi`` aggregates."""
    widest = 1
    for node in phi.walk():
        if isinstance(node, (InBox, OutBox)):
            widest = max(widest, 6)
        elif isinstance(node, (And, Or)):
            widest = max(widest, len(node.args))
        elif isinstance(node, (Always, Eventually)):
            widest = max(widest, node.hi - node.lo + 1)
        elif isinstance(node, Until):
            widest = max(widest, node.hi + 1)
    return widest
