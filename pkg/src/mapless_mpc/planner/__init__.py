from .config import MpcConfig, MpcSolution
from .costs import (HorizonObjective, collision_cost, collision_cost_gradient, smoothness_cost,
                    terminal_cost, total_cost, waypoint_cost)
from .pipeline import Planner, StepResult, control_step, local_goal
from .solver import solve, warm_start

__all__ = [
    "HorizonObjective", "MpcConfig", "MpcSolution", "Planner", "StepResult",
    "collision_cost", "collision_cost_gradient", "control_step", "local_goal",
    "smoothness_cost", "solve", "terminal_cost", "total_cost", "warm_start", "waypoint_cost",
]
