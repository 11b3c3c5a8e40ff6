import numpy as np
import pytest

from mapless_mpc.dynamics import ModelParams, QuadState
from mapless_mpc.perception import CameraIntrinsics, PerceptionConfig, camera_pose
from mapless_mpc.planner import MpcConfig
from mapless_mpc.simenv import Cylinder, Scene, render_depth


def hover_state(p=(0.0, 15.0, 1.5), yaw=0.0, v=(0.0, 0.0, 0.0)) -> QuadState:
    return QuadState(p=np.array(p, dtype=float), phi=float(yaw), v=np.array(v, dtype=float),
                     a=np.zeros(3))


def pillar_scene(x=20.0, y=15.0, radius=0.3) -> Scene:
    return Scene(obstacles=(Cylinder(x, y, radius, 8.0),), bounds=(0, 0, 0, 50, 30, 8),
                 start=np.array([2.5, 15.0, 1.5]), goal=np.array([37.5, 15.0, 1.5]), seed=0)


def render_from(scene, state: QuadState, intr=None):
    intr = intr or CameraIntrinsics.from_fov()
    return render_depth(scene, camera_pose(state.p, state.phi), intr)


@pytest.fixture
def intr():
    return CameraIntrinsics.from_fov()


@pytest.fixture
def mpc_cfg():
    return MpcConfig()


@pytest.fixture
def params():
    return ModelParams()


@pytest.fixture
def pcfg():
    return PerceptionConfig()


def assert_shooting_invariant(solution, x0: QuadState, dt: float, params: ModelParams):
    """Stored states equal a fresh rk4_step rollout of the stored inputs; inputs in bounds."""
    from mapless_mpc.dynamics import ControlInput, rk4_step

    x = x0
    for u, stored in zip(solution.inputs, solution.states):
        x = rk4_step(x, ControlInput.from_vector(u), dt, params)
        np.testing.assert_allclose(stored, x.to_vector(), rtol=0, atol=1e-9)
    assert np.all(solution.inputs >= params.u_min) and np.all(solution.inputs <= params.u_max)


# Every solver call made anywhere in the suite is re-rolled independently.
SOLVE_AUDIT = {"checked": 0, "violations": []}

# Acceptance outcomes, keyed by criterion number: (title, passed, detail).
ACCEPTANCE: dict = {}


def _shooting_error(solution, x0, dt: float, params: ModelParams) -> str | None:
    from mapless_mpc.dynamics import rk4_step_vec

    x = np.asarray(x0, dtype=float)
    for h, (u, stored) in enumerate(zip(solution.inputs, solution.states)):
        x = rk4_step_vec(x, u, dt, params)
        err = float(np.max(np.abs(stored - x)))
        if not err <= 1e-9:
            return f"state {h} differs from re-roll by {err:.3g}"
    if np.any(solution.inputs < params.u_min) or np.any(solution.inputs > params.u_max):
        return "input outside bounds"
    return None


def _audited(solve):
    def wrapper(x_init, refs, trees, warm, cfg, params, *args, **kwargs):
        solution = solve(x_init, refs, trees, warm, cfg, params, *args, **kwargs)
        SOLVE_AUDIT["checked"] += 1
        msg = _shooting_error(solution, x_init.to_vector(), cfg.dt, params)
        if msg is not None:
            SOLVE_AUDIT["violations"].append(msg)
        return solution

    wrapper.__wrapped__ = solve
    wrapper.__doc__ = solve.__doc__
    return wrapper


def pytest_configure(config):
    import mapless_mpc.planner as planner
    from mapless_mpc.planner import pipeline, solver

    audited = _audited(solver.solve)
    for mod in (planner, pipeline, solver):
        mod.solve = audited


@pytest.fixture(autouse=True)
def _shooting_audit():
    before = len(SOLVE_AUDIT["violations"])
    yield
    new = SOLVE_AUDIT["violations"][before:]
    assert not new, f"shooting invariant violated: {new[:3]}"


def pytest_terminal_summary(terminalreporter):
    tr = terminalreporter
    tr.write_sep("-", f"solver calls audited for the shooting invariant: "
                      f"{SOLVE_AUDIT['checked']}, violations: {len(SOLVE_AUDIT['violations'])}")
    if ACCEPTANCE:
        tr.write_sep("=", "acceptance criteria")
        for num in sorted(ACCEPTANCE):
            title, passed, detail = ACCEPTANCE[num]
            tr.write_line(f"[{'PASS' if passed else 'FAIL'}] {num:2d}. {title}: {detail}")
