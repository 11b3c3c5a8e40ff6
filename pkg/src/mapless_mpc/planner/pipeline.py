"""Per-tick planning: depth frame + goal in, first control action out."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from ..dynamics import ControlInput, ModelParams, QuadState
from ..perception import (DepthImage, DualTrees, KeyframeManager, PerceptionConfig,
                          build_dual_trees, coarse_adjust)
from ..waypoints import WaypointSequence, map_horizon_refs, sample_waypoints
from .config import MpcConfig, MpcSolution
from .solver import solve, warm_start


def local_goal(p, goal, reach: float) -> np.ndarray:
    """Point at most ``reach`` meters from ``p`` along the segment to ``goal``."""
    p = np.asarray(p, dtype=float)
    seg = np.asarray(goal, dtype=float) - p
    dist = float(np.linalg.norm(seg))
    if dist <= reach:
        return np.asarray(goal, dtype=float)
    return p + seg * (reach / dist)


@dataclass
class StepResult:
    control: ControlInput
    solution: MpcSolution
    trees: DualTrees
    waypoints: WaypointSequence
    refs: WaypointSequence
    wall_time: float

    def __iter__(self):
        return iter((self.control, self.solution, self.trees))

    def min_obstacle_distance(self) -> float:
        obs = self.solution.obstacles
        if obs is None or obs.size == 0 or not np.isfinite(obs).any():
            return float("inf")
        d = np.linalg.norm(self.solution.states[:, None, 0:3] - obs, axis=-1)
        return float(np.nanmin(d))


def control_step(x_now: QuadState, frame: DepthImage, goal, v_des: float, cfg: MpcConfig,
                 params: ModelParams, perception: PerceptionConfig | None = None,
                 keyframes: KeyframeManager | None = None) -> StepResult:
    """Waypoints, dual trees, coarse adjustment, warm start and solve for one frame.

    Waypoints are sampled towards a receding local goal one horizon of travel
    at ``v_des`` ahead (or the goal itself when closer).
    """
    t0 = time.perf_counter()
    perception = perception or PerceptionConfig()
    pcfg = replace(perception, dt=cfg.dt,
                   min_forward_speed=max(perception.min_forward_speed, v_des))
    target = local_goal(x_now.p, goal, v_des * cfg.horizon * cfg.dt)
    waypoints = sample_waypoints(x_now, target, v_des, cfg.n_waypoints)
    trees = build_dual_trees(frame, x_now, pcfg, keyframes if pcfg.multi_frame else None)
    adjusted = coarse_adjust(waypoints, trees) if pcfg.edge_tree else waypoints
    refs = map_horizon_refs(adjusted, cfg.horizon)
    warm = warm_start(refs, x_now, cfg, params)
    solution = solve(x_now, refs, trees, warm, cfg, params)
    if solution.fallback:
        u1 = params.clip(warm[1][0])
    else:
        u1 = solution.inputs[0]
    return StepResult(control=ControlInput.from_vector(u1), solution=solution, trees=trees,
                      waypoints=adjusted, refs=refs, wall_time=time.perf_counter() - t0)


class Planner:
    """Stateful wrapper keeping the keyframe set between ticks."""

    def __init__(self, cfg: MpcConfig | None = None, params: ModelParams | None = None,
                 perception: PerceptionConfig | None = None):
        self.cfg = cfg or MpcConfig()
        self.params = params or ModelParams()
        self.perception = perception or PerceptionConfig()
        self.keyframes = KeyframeManager(self.perception)

    def step(self, x_now: QuadState, frame: DepthImage, goal, v_des: float) -> StepResult:
        return control_step(x_now, frame, goal, v_des, self.cfg, self.params,
                            self.perception, self.keyframes)

    def reset(self):
        self.keyframes.reset()
