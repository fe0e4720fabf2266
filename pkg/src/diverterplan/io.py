"""Plan directory layout: trajectory tables, routing summary, report and metadata."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .scenario import SignalBundle, Trajectory, UavSpec

TRAJ_COLUMNS = ("t", "p1", "p2", "p3", "v1", "v2", "v3", "a1", "a2", "a3")


def trajectory_text(tr: Trajectory, T_s: float) -> str:
    """One row per sample; the input column of the last row is zero (no input after the horizon)."""
    N = tr.N
    a = np.vstack([tr.a, np.zeros((1, 3))])
    lines = [",".join(TRAJ_COLUMNS)]
    for k in range(N + 1):
        row = [k * T_s, *tr.p[k], *tr.v[k], *a[k]]
        lines.append(",".join(repr(float(x)) for x in row))
    return "\n".join(lines) + "\n"


def traj_path(directory, uav_id: str) -> Path:
    return Path(directory) / f"trajectory_{uav_id}.csv"


def write_trajectories(bundle: SignalBundle, directory, only: Sequence[str] | None = None) -> list[Path]:
    os.makedirs(directory, exist_ok=True)
    out = []
    for tr in bundle.trajectories:
        if only is not None and tr.uav_id not in only:
            continue
        path = traj_path(directory, tr.uav_id)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(trajectory_text(tr, bundle.T_s))
        out.append(path)
    return out


class TrajectoryFormatError(ValueError):
    pass


def read_trajectory(path) -> tuple[Trajectory, float]:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if tuple(header) != TRAJ_COLUMNS:
            raise TrajectoryFormatError(f"{path}: header must be {','.join(TRAJ_COLUMNS)}")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.shape[0] < 2 or data.shape[1] != len(TRAJ_COLUMNS):
        raise TrajectoryFormatError(f"{path}: expected at least two rows of {len(TRAJ_COLUMNS)} columns")
    t = data[:, 0]
    T_s = float(t[1] - t[0])
    if not np.allclose(np.diff(t), T_s, atol=1e-9):
        raise TrajectoryFormatError(f"{path}: time column is not uniformly spaced")
    uav = path.stem[len("trajectory_"):]
    return Trajectory(uav, data[:, 1:4], data[:, 4:7], data[:-1, 7:10]), T_s


def read_bundle(directory, ids: Sequence[str] | None = None) -> SignalBundle:
    directory = Path(directory)
    if ids is None:
        paths = sorted(directory.glob("trajectory_*.csv"))
    else:
        paths = [traj_path(directory, u) for u in ids]
    if not paths:
        raise TrajectoryFormatError(f"no trajectory files in {directory}")
    trajs, periods = [], set()
    for p in paths:
        tr, T_s = read_trajectory(p)
        trajs.append(tr)
        periods.add(round(T_s, 12))
    if len(periods) != 1 or len({tr.N for tr in trajs}) != 1:
        raise TrajectoryFormatError("trajectory files do not share one time grid")
    return SignalBundle(tuple(trajs), periods.pop())


def write_yaml(path, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)


def read_yaml(path):
    with open(path, encoding="utf-8") as fh:
        return yaml.safe_load(fh)


def load_event(path):
    """Failure event document: failed_uav, t_fail, backup {id, capacity, start, payload?}."""
    from .optimizer import EventError, FailureEvent

    doc = read_yaml(path)
    try:
        b = doc["backup"]
        backup = UavSpec(str(b["id"]), int(b["capacity"]), [float(x) for x in b["start"]])
        return FailureEvent(str(doc["failed_uav"]), float(doc["t_fail"]), backup,
                            None if b.get("payload") is None else int(b["payload"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise EventError(f"malformed event file {path}: {exc}") from exc
