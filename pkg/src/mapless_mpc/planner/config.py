from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

VELOCITY_MODES = ("norm", "directional")


def _diag(values, n):
    arr = np.asarray(values, dtype=float).reshape(n)
    return arr


@dataclass(frozen=True)
class MpcConfig:
    """Horizon, cost weights and solver limits.

    ``q_goal`` and ``q_wp`` are diagonals over ``(p, phi, v, a)``; ``q_u`` over
    ``(a_c, phi_c)``.
    """

    horizon: int = 30
    dt: float = 0.033
    n_waypoints: int = 30
    m_nearest: int = 3
    r_q: float = 1.0
    beta: float = 32.0
    lambda_c: float = 1.0
    q_goal: np.ndarray = field(default_factory=lambda: np.array(
        [4.0, 4.0, 4.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0]))
    q_wp: np.ndarray = field(default_factory=lambda: np.array(
        [2.0, 2.0, 2.0, 0.5, 0.2, 0.2, 0.2, 0.0, 0.0, 0.0]))
    q_u: np.ndarray = field(default_factory=lambda: np.array([0.1, 0.1, 0.1, 0.1]))
    max_iter: int = 10
    tol: float = 1e-6
    velocity_weight_mode: str = "directional"

    def __post_init__(self):
        object.__setattr__(self, "q_goal", _diag(self.q_goal, 10))
        object.__setattr__(self, "q_wp", _diag(self.q_wp, 10))
        object.__setattr__(self, "q_u", _diag(self.q_u, 4))
        if self.velocity_weight_mode not in VELOCITY_MODES:
            raise ValueError(f"velocity_weight_mode must be one of {VELOCITY_MODES}")
        if self.horizon < 1 or self.n_waypoints < 2 or self.m_nearest < 1:
            raise ValueError("horizon >= 1, n_waypoints >= 2 and m_nearest >= 1 required")
        if self.dt <= 0 or self.r_q <= 0 or self.beta <= 0:
            raise ValueError("dt, r_q and beta must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if (self.lambda_c < 0 or np.any(self.q_goal < 0) or np.any(self.q_wp < 0)
                or np.any(self.q_u < 0)):
            raise ValueError("cost weights must be non-negative")

    def scaled(self, c: float) -> MpcConfig:
        """Copy with every cost weight multiplied by ``c``."""
        from dataclasses import replace
        return replace(self, lambda_c=self.lambda_c * c, q_goal=self.q_goal * c,
                       q_wp=self.q_wp * c, q_u=self.q_u * c)


@dataclass(frozen=True)
class MpcSolution:
    inputs: np.ndarray
    states: np.ndarray
    cost: float
    breakdown: dict
    iterations: int
    solve_time: float
    cost_history: tuple = ()
    warm_cost: float = float("nan")
    fallback: bool = False
    degenerate_distances: int = 0
    obstacles: np.ndarray = None

    @property
    def first_input(self) -> np.ndarray:
        return self.inputs[0]
