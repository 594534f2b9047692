"""State, trajectory and normalization types shared by every module.

Channel order is fixed everywhere as ``[theta_1..theta_D, omega_1..omega_D,
tau_1..tau_D]``; this is also the column order of the CSV files.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

CHANNELS = ("theta", "omega", "tau")
STD_FLOOR = 1e-6


def _frozen(a, dim=None) -> np.ndarray:
    arr = np.array(a, dtype=np.float64).reshape(-1)
    if dim is not None and arr.shape[0] != dim:
        raise ValueError(f"expected {dim} joint values, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("joint vector contains non-finite values")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class RobotState:
    """Joint angles (rad), velocities (rad/s) and torques (N m) at one tick."""

    theta: np.ndarray
    omega: np.ndarray
    tau: np.ndarray

    def __post_init__(self):
        theta = _frozen(self.theta)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "omega", _frozen(self.omega, theta.size))
        object.__setattr__(self, "tau", _frozen(self.tau, theta.size))

    @property
    def dim(self) -> int:
        return self.theta.size

    @classmethod
    def zeros(cls, dim: int) -> "RobotState":
        z = np.zeros(dim)
        return cls(z, z, z)

    def replace(self, **kw) -> "RobotState":
        vals = {"theta": self.theta, "omega": self.omega, "tau": self.tau}
        vals.update(kw)
        return RobotState(**vals)

    def __eq__(self, other):
        if not isinstance(other, RobotState):
            return NotImplemented
        return all(np.array_equal(getattr(self, c), getattr(other, c)) for c in CHANNELS)

    __hash__ = None


def flatten(state: RobotState) -> np.ndarray:
    return np.concatenate([state.theta, state.omega, state.tau])


def unflatten(vec, dim: int | None = None) -> RobotState:
    vec = np.asarray(vec, dtype=np.float64).reshape(-1)
    if dim is None:
        if vec.size % 3:
            raise ValueError(f"flat state length {vec.size} is not a multiple of 3")
        dim = vec.size // 3
    if vec.size != 3 * dim:
        raise ValueError(f"flat state length {vec.size} != 3*{dim}")
    return RobotState(vec[:dim], vec[dim:2 * dim], vec[2 * dim:])


def channel_slices(dim: int) -> dict[str, slice]:
    return {c: slice(i * dim, (i + 1) * dim) for i, c in enumerate(CHANNELS)}


class Trajectory:
    """Uniformly sampled sequence of robot states.

    Stored as a read-only ``(T, 3D)`` array of flattened states; indexing
    returns :class:`RobotState` objects.
    """

    def __init__(self, dt: float, states):
        if not dt > 0:
            raise ValueError("dt must be positive")
        if isinstance(states, np.ndarray):
            data = np.array(states, dtype=np.float64)
        else:
            states = list(states)
            data = np.array([flatten(s) if isinstance(s, RobotState) else s for s in states],
                            dtype=np.float64)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] % 3:
            raise ValueError(f"bad trajectory array shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("trajectory contains non-finite values")
        data.setflags(write=False)
        self.dt = float(dt)
        self.data = data

    @property
    def dim(self) -> int:
        return self.data.shape[1] // 3

    @property
    def states(self) -> list[RobotState]:
        return [self[i] for i in range(len(self))]

    @property
    def theta(self) -> np.ndarray:
        return self.data[:, : self.dim]

    def __len__(self):
        return self.data.shape[0]

    def __getitem__(self, k) -> RobotState:
        return unflatten(self.data[k], self.dim)

    def __eq__(self, other):
        return (isinstance(other, Trajectory) and self.dt == other.dt
                and np.array_equal(self.data, other.data))

    __hash__ = None

    def __repr__(self):
        return f"Trajectory(dt={self.dt}, T={len(self)}, D={self.dim})"


@dataclass(frozen=True)
class Demonstration:
    leader: Trajectory
    follower: Trajectory
    name: str = ""

    def __post_init__(self):
        if len(self.leader) != len(self.follower):
            raise ValueError("leader and follower lengths differ")
        if self.leader.dt != self.follower.dt:
            raise ValueError("leader and follower dt differ")
        if self.leader.dim != self.follower.dim:
            raise ValueError("leader and follower joint counts differ")

    def __len__(self):
        return len(self.leader)

    @property
    def dt(self) -> float:
        return self.leader.dt

    @property
    def dim(self) -> int:
        return self.leader.dim


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray = field()

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).copy()
        std = np.asarray(self.std, dtype=np.float64).copy()
        if mean.shape != std.shape:
            raise ValueError("mean/std shape mismatch")
        if np.any(std <= 0):
            raise ValueError("std entries must be strictly positive")
        mean.setflags(write=False)
        std.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d) -> "NormStats":
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64))


def _as_rows(trajs) -> np.ndarray:
    blocks = []
    for tr in trajs:
        if isinstance(tr, Demonstration):
            blocks += [tr.leader.data, tr.follower.data]
        elif isinstance(tr, Trajectory):
            blocks.append(tr.data)
        else:
            blocks.append(np.atleast_2d(np.asarray(tr, dtype=np.float64)))
    if not blocks:
        raise ValueError("no data")
    return np.concatenate(blocks, axis=0)


def compute_norm_stats(trajs: Iterable) -> NormStats:
    """Population mean/std over every flattened state in ``trajs``.

    Demonstrations contribute both their leader and follower states, so a
    single set of statistics normalizes both robots.
    """
    rows = _as_rows(list(trajs))
    if rows.shape[0] == 0:
        raise ValueError("no data")
    mean = rows.mean(axis=0)
    std = np.sqrt(((rows - mean) ** 2).mean(axis=0))
    return NormStats(mean, np.maximum(std, STD_FLOOR))


def _check_len(v, stats):
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != stats.mean.shape[0]:
        raise ValueError(f"length mismatch: {v.shape[-1]} vs {stats.mean.shape[0]}")
    return v


def normalize(v, stats: NormStats) -> np.ndarray:
    v = _check_len(v, stats)
    return (v - stats.mean) / stats.std


def denormalize(v, stats: NormStats) -> np.ndarray:
    v = _check_len(v, stats)
    return v * stats.std + stats.mean


class StateScaler(TransformerMixin, BaseEstimator):
    """Standardizes flattened robot states with a floored std.

    Works like ``StandardScaler`` but accepts trajectories/demonstrations in
    ``fit`` and keeps the statistics as a :class:`NormStats`.
    """

    def __init__(self, std_floor: float = STD_FLOOR):
        self.std_floor = std_floor

    def fit(self, X, y=None):
        if isinstance(X, np.ndarray):
            rows = check_array(X)
        else:
            rows = _as_rows(list(X))
        if rows.shape[0] == 0:
            raise ValueError("no data")
        mean = rows.mean(axis=0)
        std = np.sqrt(((rows - mean) ** 2).mean(axis=0))
        self.stats_ = NormStats(mean, np.maximum(std, self.std_floor))
        self.n_features_in_ = rows.shape[1]
        return self

    @classmethod
    def from_stats(cls, stats: NormStats) -> "StateScaler":
        sc = cls()
        sc.stats_ = stats
        sc.n_features_in_ = stats.mean.shape[0]
        return sc

    def transform(self, X):
        check_is_fitted(self, "stats_")
        return normalize(X, self.stats_)

    def inverse_transform(self, X):
        check_is_fitted(self, "stats_")
        return denormalize(X, self.stats_)


# ---------------------------------------------------------------------------
# CSV files
# ---------------------------------------------------------------------------

def state_columns(dim: int, prefix: str = "") -> list[str]:
    return [f"{prefix}{c}_{j}" for c in CHANNELS for j in range(dim)]


def _fmt(x: float) -> str:
    return repr(float(x))


def _write_rows(fh, header, rows, meta):
    if meta:
        fh.write("# " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n")
    fh.write(",".join(header) + "\n")
    for r in rows:
        fh.write(",".join(_fmt(x) for x in r) + "\n")


def trajectory_to_csv(traj: Trajectory, path, meta: dict | None = None) -> None:
    header = ["t"] + state_columns(traj.dim)
    t = np.arange(len(traj)) * traj.dt
    with open(path, "w", newline="\n") as fh:
        _write_rows(fh, header, np.column_stack([t, traj.data]), meta)


def demonstration_to_csv(demo: Demonstration, path, meta: dict | None = None) -> None:
    d = demo.dim
    header = ["t"] + state_columns(d, "l_") + state_columns(d, "f_")
    t = np.arange(len(demo)) * demo.dt
    with open(path, "w", newline="\n") as fh:
        _write_rows(fh, header, np.column_stack([t, demo.leader.data, demo.follower.data]), meta)


def read_csv_table(path) -> tuple[list[str], np.ndarray, dict]:
    """Read a numeric CSV, returning (header, values, metadata-from-comments)."""
    meta: dict[str, str] = {}
    body = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                for tok in line[1:].split():
                    if "=" in tok:
                        k, v = tok.split("=", 1)
                        meta[k] = v
            elif line.strip():
                body.append(line)
    if not body:
        raise ValueError(f"{path}: empty CSV")
    header = body[0].strip().split(",")
    if len(body) == 1:
        return header, np.zeros((0, len(header))), meta
    values = np.loadtxt(io.StringIO("".join(body[1:])), delimiter=",", ndmin=2)
    return header, values, meta


def _dt_from(t: np.ndarray, default: float) -> float:
    if t.size >= 2:
        return float(t[1] - t[0])
    return default


def trajectory_from_csv(path, dt: float = 0.01) -> Trajectory:
    header, vals, _ = read_csv_table(path)
    if header[0] != "t" or (len(header) - 1) % 3:
        raise ValueError(f"{path}: not a trajectory CSV")
    return Trajectory(_dt_from(vals[:, 0], dt), vals[:, 1:])


def demonstration_from_csv(path, dt: float = 0.01, name: str | None = None) -> Demonstration:
    header, vals, _ = read_csv_table(path)
    n = len(header) - 1
    if header[0] != "t" or n % 6 or not header[1].startswith("l_"):
        raise ValueError(f"{path}: not a demonstration CSV")
    half = n // 2
    step = _dt_from(vals[:, 0], dt)
    return Demonstration(Trajectory(step, vals[:, 1:1 + half]),
                         Trajectory(step, vals[:, 1 + half:]),
                         name=Path(path).stem if name is None else name)


def stack_states(states: Sequence[RobotState]) -> np.ndarray:
    return np.array([flatten(s) for s in states])
