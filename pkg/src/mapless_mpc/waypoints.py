"""Sparse waypoint references and their mapping onto the MPC horizon."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import QuadState
from .errors import InvalidInputError


@dataclass(frozen=True)
class WaypointSequence:
    """Reference positions, yaws and velocities for indices 1..N.

    ``origin`` is the vehicle position the sequence was sampled from. The last
    entry doubles as the goal state for the terminal cost.
    """

    positions: np.ndarray
    yaws: np.ndarray
    velocities: np.ndarray
    origin: np.ndarray
    adjusted: np.ndarray = field(default=None)
    unresolved: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.positions)
        object.__setattr__(self, "positions", np.asarray(self.positions, dtype=float).reshape(n, 3))
        object.__setattr__(self, "yaws", np.asarray(self.yaws, dtype=float).reshape(n))
        object.__setattr__(self, "velocities", np.asarray(self.velocities, dtype=float).reshape(n, 3))
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float).reshape(3))
        for name in ("adjusted", "unresolved"):
            val = getattr(self, name)
            val = np.zeros(n, dtype=bool) if val is None else np.asarray(val, dtype=bool).reshape(n)
            object.__setattr__(self, name, val)

    def __len__(self) -> int:
        return len(self.positions)

    def with_positions(self, positions, adjusted=None, unresolved=None) -> WaypointSequence:
        return replace(self, positions=positions,
                       adjusted=self.adjusted if adjusted is None else adjusted,
                       unresolved=self.unresolved if unresolved is None else unresolved)

    def goal_vector(self) -> np.ndarray:
        """Final waypoint as a 10-dim state (zero acceleration)."""
        return np.concatenate([self.positions[-1], [self.yaws[-1]],
                               self.velocities[-1], np.zeros(3)])

    def state_refs(self) -> np.ndarray:
        """All waypoints as ``(N, 10)`` reference states."""
        n = len(self)
        return np.hstack([self.positions, self.yaws[:, None], self.velocities,
                          np.zeros((n, 3))])


def sample_waypoints(current: QuadState, goal, v_des: float, n: int) -> WaypointSequence:
    """Uniformly spaced waypoints from the current position to ``goal``.

    Yaw references face the goal in the horizontal plane and every reference
    velocity is ``v_des`` along the segment.
    """
    if n < 2:
        raise InvalidInputError(f"need at least 2 waypoints, got {n}")
    p0 = np.asarray(current.p, dtype=float)
    seg = np.asarray(goal, dtype=float).reshape(3) - p0
    length = float(np.linalg.norm(seg))
    if length == 0.0:
        raise InvalidInputError("goal coincides with the current position")
    unit = seg / length
    frac = np.arange(1, n + 1) / n
    positions = p0 + frac[:, None] * seg
    if np.hypot(seg[0], seg[1]) > 0.0:
        yaw = float(np.arctan2(seg[1], seg[0]))
    else:
        yaw = current.phi
    return WaypointSequence(positions=positions, yaws=np.full(n, yaw),
                            velocities=np.tile(v_des * unit, (n, 1)), origin=p0)


def map_horizon_refs(waypoints: WaypointSequence, horizon: int) -> WaypointSequence:
    """Resample N waypoints onto H horizon steps by nearest arc length.

    Step h (1-based) targets arc length ``h/H * L`` measured from the origin
    along the waypoint polyline; the waypoint with the nearest arc length is
    used, ties going to the later waypoint.
    """
    n = len(waypoints)
    if n < 1 or horizon < 1:
        raise InvalidInputError("waypoint count and horizon must be positive")
    if n == horizon:
        return waypoints
    pts = np.vstack([waypoints.origin, waypoints.positions])
    arc = np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))
    total = arc[-1]
    if total > 0:
        s = np.arange(1, horizon + 1) / horizon * total
        gap = np.abs(arc[None, :] - s[:, None])
        tol = 1e-9 * total
        # last index attaining the minimum (within tol) -> ties favour later
        best = gap.min(axis=1, keepdims=True)
        idx = n - 1 - np.argmax((gap <= best + tol)[:, ::-1], axis=1)
    else:
        idx = np.minimum((np.arange(1, horizon + 1) * n + horizon - 1) // horizon, n) - 1
    return WaypointSequence(positions=waypoints.positions[idx], yaws=waypoints.yaws[idx],
                            velocities=waypoints.velocities[idx], origin=waypoints.origin,
                            adjusted=waypoints.adjusted[idx],
                            unresolved=waypoints.unresolved[idx])
