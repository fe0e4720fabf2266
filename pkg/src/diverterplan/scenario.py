"""World description, planner configuration and scenario document I/O.

A scenario document is YAML with the top-level keys ``workspace``,
``obstacles``, ``targets``, ``refills``, ``fleet`` and ``config``. Boxes are
``{lo: [x, y, z], hi: [x, y, z]}`` with an optional ``name``; fleet entries
are ``{id, capacity, depot}``. Config keys left out take the default mission
parameters below.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Any, Sequence

import numpy as np
import yaml


class SchemaError(ValueError):
    """The document does not follow the scenario schema."""

    def __init__(self, message: str, field_path: str = "", line: int | None = None):
        self.field_path = field_path
        self.line = line
        where = field_path or "<document>"
        if line is not None:
            where += f" (line {line})"
        super().__init__(f"{where}: {message}")


class ScenarioValidationError(ValueError):
    """The document parsed, but the scenario breaks an invariant."""

    def __init__(self, diagnostics: list[str]):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(self.diagnostics))


def _vec3(values, name: str = "vector") -> np.ndarray:
    arr = np.array(values, dtype=np.float64).reshape(-1)
    if arr.shape != (3,):
        raise ValueError(f"{name} must have exactly 3 components, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Box3:
    """Axis-aligned box ``[lo, hi]`` in meters."""

    lo: np.ndarray
    hi: np.ndarray
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "lo", _vec3(self.lo, "lo"))
        object.__setattr__(self, "hi", _vec3(self.hi, "hi"))
        if not np.all(self.lo < self.hi):
            raise ValueError(f"box {self.name or ''}: lo must be < hi on every axis")

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def contains_box(self, other: "Box3") -> bool:
        return bool(np.all(other.lo >= self.lo) and np.all(other.hi <= self.hi))

    def intersects(self, other: "Box3") -> bool:
        # open interiors overlap; touching faces do not count
        return bool(np.all(self.lo < other.hi) and np.all(other.lo < self.hi))

    def contains_point(self, p) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p > self.lo) and np.all(p < self.hi))

    def __eq__(self, other):
        if not isinstance(other, Box3):
            return NotImplemented
        return (
            self.name == other.name
            and np.array_equal(self.lo, other.lo)
            and np.array_equal(self.hi, other.hi)
        )

    def __hash__(self):
        return hash((self.name, tuple(self.lo), tuple(self.hi)))

    def __repr__(self):
        return f"Box3({self.name!r}, lo={self.lo.tolist()}, hi={self.hi.tolist()})"


@dataclass(frozen=True, eq=False)
class UavSpec:
    id: str
    capacity: int
    depot: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "depot", _vec3(self.depot, "depot"))

    def __eq__(self, other):
        if not isinstance(other, UavSpec):
            return NotImplemented
        return (
            self.id == other.id
            and self.capacity == other.capacity
            and np.array_equal(self.depot, other.depot)
        )

    def __hash__(self):
        return hash((self.id, self.capacity, tuple(self.depot)))


@dataclass(frozen=True)
class Scenario:
    workspace: Box3
    obstacles: tuple[Box3, ...] = ()
    targets: tuple[Box3, ...] = ()
    refills: tuple[Box3, ...] = ()
    fleet: tuple[UavSpec, ...] = ()

    def __post_init__(self):
        for name in ("obstacles", "targets", "refills", "fleet"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    def uav_index(self, uav_id: str) -> int:
        for i, u in enumerate(self.fleet):
            if u.id == uav_id:
                return i
        raise KeyError(uav_id)


@dataclass(frozen=True)
class PlannerConfig:
    """Mission and solver parameters. Defaults are the reference mission values."""

    t_N: float = 155.0
    t_ins: float = 5.0
    t_rs: float = 12.0
    t_rep: float = 10.0
    T_s: float = 0.05
    Gamma: float = 3.0
    v_max: float = 3.1
    a_max: float = 3.1
    sigma_bar: float = 10.0
    lam: float = 10.0
    eta: float = 1.0
    v_star: float = 2.5
    max_iters: int = 400
    seed: int = 0

    def __post_init__(self):
        problems = config_diagnostics(self)
        if problems:
            raise ScenarioValidationError(problems)

    @property
    def N(self) -> int:
        return int(round(self.t_N / self.T_s))

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.T_s

    def steps(self, seconds: float) -> int:
        """Seconds to a sample count, rounding half up."""
        return int(math.floor(seconds / self.T_s + 0.5 + 1e-9))

    @property
    def n_ins(self) -> int:
        return self.steps(self.t_ins)

    @property
    def n_rs(self) -> int:
        return self.steps(self.t_rs)

    def with_(self, **changes) -> "PlannerConfig":
        return replace(self, **changes)


# document key -> attribute name
_CONFIG_KEYS = {f.name: f.name for f in fields(PlannerConfig)}
_CONFIG_KEYS["lambda"] = "lam"
del _CONFIG_KEYS["lam"]
_INT_CONFIG = {"max_iters", "seed"}


def config_diagnostics(cfg: PlannerConfig) -> list[str]:
    out = []
    for name in ("t_N", "t_ins", "t_rs", "t_rep", "T_s"):
        if not getattr(cfg, name) > 0:
            out.append(f"config.{name} must be strictly positive")
    if not out and not cfg.t_ins + cfg.t_rs < cfg.t_N:
        out.append("config: t_ins + t_rs must be < t_N")
    for name in ("Gamma", "v_max", "a_max", "lam"):
        if not getattr(cfg, name) > 0:
            key = "lambda" if name == "lam" else name
            out.append(f"config.{key} must be strictly positive")
    if not 0.0 <= cfg.eta <= 1.0:
        out.append("config.eta must lie in [0, 1]")
    if cfg.sigma_bar < 0:
        out.append("config.sigma_bar must be >= 0")
    if cfg.max_iters < 0:
        out.append("config.max_iters must be >= 0")
    return out


def validate_scenario(s: Scenario) -> list[str]:
    """One diagnostic string per violated scenario invariant (empty when valid)."""
    diags = []
    if len(s.targets) < 1:
        diags.append("scenario needs at least one target")
    if len(s.refills) < 1:
        diags.append("scenario needs at least one refill station")
    if len(s.fleet) < 1:
        diags.append("scenario needs at least one UAV in the fleet")
    for kind, boxes in (("target", s.targets), ("refill", s.refills)):
        for i, b in enumerate(boxes):
            if not s.workspace.contains_box(b):
                diags.append(f"{kind} {b.name or i} is not contained in the workspace")
    for i, t in enumerate(s.targets):
        for j, o in enumerate(s.obstacles):
            if t.intersects(o):
                diags.append(f"target {t.name or i} intersects obstacle {o.name or j}")
    seen = set()
    for u in s.fleet:
        if u.id in seen:
            diags.append(f"duplicate UAV id {u.id}")
        seen.add(u.id)
        if u.capacity < 1:
            diags.append(f"UAV {u.id} capacity must be >= 1")
        if not s.workspace.contains_point(u.depot):
            diags.append(f"UAV {u.id} depot lies outside the workspace")
    return diags


# ---------------------------------------------------------------- parsing


def _node_line(root, path: Sequence[Any]) -> int | None:
    node = root
    line = node.start_mark.line + 1 if node is not None else None
    for key in path:
        if isinstance(node, yaml.MappingNode):
            nxt = None
            for k, v in node.value:
                if k.value == key:
                    nxt = v
                    line = k.start_mark.line + 1
                    break
            if nxt is None:
                return line
            node = nxt
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
            line = node.start_mark.line + 1
        else:
            return line
    return line


def _path_str(path) -> str:
    s = ""
    for p in path:
        s += f"[{p}]" if isinstance(p, int) else (f".{p}" if s else str(p))
    return s


class _Reader:
    def __init__(self, root):
        self.root = root

    def fail(self, msg, path):
        raise SchemaError(msg, _path_str(path), _node_line(self.root, path))

    def vec3(self, value, path):
        if not isinstance(value, (list, tuple)) or len(value) != 3:
            self.fail("expected a list of 3 numbers", path)
        try:
            out = [float(x) for x in value]
        except (TypeError, ValueError):
            self.fail("expected a list of 3 numbers", path)
        if not all(math.isfinite(x) for x in out):
            self.fail("values must be finite", path)
        return out

    def box(self, value, path):
        if not isinstance(value, dict):
            self.fail("expected a mapping with lo/hi", path)
        for key in ("lo", "hi"):
            if key not in value:
                self.fail(f"missing field '{key}'", path)
        unknown = set(value) - {"lo", "hi", "name"}
        if unknown:
            self.fail(f"unknown field(s) {sorted(unknown)}", path)
        lo = self.vec3(value["lo"], path + ["lo"])
        hi = self.vec3(value["hi"], path + ["hi"])
        if not all(a < b for a, b in zip(lo, hi)):
            raise ScenarioValidationError(
                [f"{_path_str(path)}: box lo must be < hi on every axis"]
            )
        return Box3(lo, hi, str(value.get("name", "")))

    def box_list(self, doc, key, required=True):
        if key not in doc:
            if required:
                self.fail(f"missing section '{key}'", [])
            return []
        value = doc[key] or []
        if not isinstance(value, list):
            self.fail("expected a list", [key])
        return [self.box(v, [key, i]) for i, v in enumerate(value)]

    def uav(self, value, path):
        if not isinstance(value, dict):
            self.fail("expected a mapping with id/capacity/depot", path)
        for key in ("id", "capacity", "depot"):
            if key not in value:
                self.fail(f"missing field '{key}'", path)
        cap = value["capacity"]
        if isinstance(cap, bool) or not isinstance(cap, int):
            self.fail("capacity must be an integer", path + ["capacity"])
        return UavSpec(str(value["id"]), cap, self.vec3(value["depot"], path + ["depot"]))

    def config(self, value):
        if value is None:
            return {}
        if not isinstance(value, dict):
            self.fail("expected a mapping", ["config"])
        out = {}
        for key, raw in value.items():
            if key == "N":
                # the sample count is always derived from t_N / T_s
                continue
            if key not in _CONFIG_KEYS:
                self.fail(f"unknown config field '{key}'", ["config", key])
            attr = _CONFIG_KEYS[key]
            if attr in _INT_CONFIG:
                if isinstance(raw, bool) or not isinstance(raw, int):
                    self.fail("expected an integer", ["config", key])
                out[attr] = int(raw)
            else:
                if isinstance(raw, bool) or not isinstance(raw, (int, float)):
                    self.fail("expected a number", ["config", key])
                out[attr] = float(raw)
        return out


def parse_scenario(text: str) -> tuple[Scenario, PlannerConfig]:
    """Parse a scenario document without checking scenario invariants."""
    try:
        root = yaml.compose(text)
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise SchemaError(str(getattr(exc, "problem", exc)), "", mark.line + 1 if mark else None)
    if not isinstance(doc, dict):
        raise SchemaError("top level must be a mapping")
    r = _Reader(root)
    unknown = set(doc) - {"workspace", "obstacles", "targets", "refills", "fleet", "config"}
    if unknown:
        r.fail(f"unknown section(s) {sorted(unknown)}", [sorted(unknown)[0]])
    if "workspace" not in doc:
        r.fail("missing section 'workspace'", [])
    workspace = r.box(doc["workspace"], ["workspace"])
    obstacles = r.box_list(doc, "obstacles", required=False)
    targets = r.box_list(doc, "targets")
    refills = r.box_list(doc, "refills")
    if "fleet" not in doc:
        r.fail("missing section 'fleet'", [])
    fleet_raw = doc["fleet"] or []
    if not isinstance(fleet_raw, list):
        r.fail("expected a list", ["fleet"])
    fleet = [r.uav(v, ["fleet", i]) for i, v in enumerate(fleet_raw)]
    cfg = PlannerConfig(**r.config(doc.get("config")))
    return Scenario(workspace, obstacles, targets, refills, fleet), cfg


def load_scenario(text: str) -> tuple[Scenario, PlannerConfig]:
    """Parse and invariant-check a scenario document."""
    s, cfg = parse_scenario(text)
    diags = validate_scenario(s)
    if diags:
        raise ScenarioValidationError(diags)
    return s, cfg


def load_scenario_file(path) -> tuple[Scenario, PlannerConfig]:
    with open(path, encoding="utf-8") as fh:
        return load_scenario(fh.read())


def _box_doc(b: Box3) -> dict:
    d = {}
    if b.name:
        d["name"] = b.name
    d["lo"] = [float(x) for x in b.lo]
    d["hi"] = [float(x) for x in b.hi]
    return d


def scenario_to_dict(s: Scenario, cfg: PlannerConfig | None = None) -> dict:
    doc: dict[str, Any] = {
        "workspace": _box_doc(s.workspace),
        "obstacles": [_box_doc(b) for b in s.obstacles],
        "targets": [_box_doc(b) for b in s.targets],
        "refills": [_box_doc(b) for b in s.refills],
        "fleet": [
            {"id": u.id, "capacity": int(u.capacity), "depot": [float(x) for x in u.depot]}
            for u in s.fleet
        ],
    }
    if cfg is not None:
        conf = {}
        for key, attr in _CONFIG_KEYS.items():
            val = getattr(cfg, attr)
            conf[key] = int(val) if attr in _INT_CONFIG else float(val)
        doc["config"] = conf
    return doc


def dump_scenario(s: Scenario, cfg: PlannerConfig | None = None) -> str:
    return yaml.safe_dump(scenario_to_dict(s, cfg), sort_keys=False, default_flow_style=None)


# ------------------------------------------------------------ trajectories


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Sampled states of one vehicle on the shared grid.

    ``p`` and ``v`` have N+1 rows, ``a`` has N rows (zero-order hold).
    """

    uav_id: str
    p: np.ndarray
    v: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        p = np.array(self.p, dtype=np.float64)
        v = np.array(self.v, dtype=np.float64)
        a = np.array(self.a, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 3 or v.shape != p.shape:
            raise ValueError("p and v must both be (N+1, 3)")
        if a.shape != (p.shape[0] - 1, 3):
            raise ValueError("a must be (N, 3)")
        for arr in (p, v, a):
            arr.flags.writeable = False
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "a", a)

    @property
    def N(self) -> int:
        return self.a.shape[0]


@dataclass(frozen=True)
class SignalBundle:
    """One trajectory per fleet member on a common time grid."""

    trajectories: tuple[Trajectory, ...]
    T_s: float

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        ns = {t.N for t in self.trajectories}
        if len(ns) > 1:
            raise ValueError("all trajectories in a bundle must share N")

    @property
    def N(self) -> int:
        return self.trajectories[0].N

    @property
    def ids(self) -> list[str]:
        return [t.uav_id for t in self.trajectories]

    @property
    def positions(self) -> np.ndarray:
        return np.stack([t.p for t in self.trajectories])

    @property
    def velocities(self) -> np.ndarray:
        return np.stack([t.v for t in self.trajectories])

    @property
    def accelerations(self) -> np.ndarray:
        return np.stack([t.a for t in self.trajectories])

    def index(self, uav_id: str) -> int:
        return self.ids.index(uav_id)

    def __getitem__(self, uav_id: str) -> Trajectory:
        return self.trajectories[self.index(uav_id)]
