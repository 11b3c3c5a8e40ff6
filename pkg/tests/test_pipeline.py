import numpy as np
import pytest

from conftest import assert_shooting_invariant, hover_state, pillar_scene, render_from
from mapless_mpc.perception import NO_RETURN, DepthImage
from mapless_mpc.planner import MpcConfig, Planner, control_step, local_goal
from mapless_mpc.planner import pipeline


def test_local_goal():
    np.testing.assert_allclose(local_goal([0, 0, 0], [10, 0, 0], 3.0), [3, 0, 0])
    np.testing.assert_allclose(local_goal([0, 0, 0], [1, 1, 0], 3.0), [1, 1, 0])


def test_empty_scene_accelerates_toward_goal(intr, mpc_cfg, params):
    st = hover_state((2.5, 15, 1.5))
    frame = DepthImage(intr, np.full((48, 64), NO_RETURN))
    u, sol, trees = control_step(st, frame, [37.5, 15, 1.5], 3.0, mpc_cfg, params)
    assert u.a_c[0] > 0
    assert abs(u.a_c[1]) < 1e-9 and abs(u.a_c[2]) < 1e-9
    uv = u.to_vector()
    assert np.all(uv >= params.u_min) and np.all(uv <= params.u_max)
    assert trees.obstacle_current.size == 0
    assert_shooting_invariant(sol, st, mpc_cfg.dt, params)


@pytest.mark.parametrize("x,side", [(15.0, 1.0), (16.0, -1.0)])
def test_head_on_pillar_turns_toward_edge_ring(intr, mpc_cfg, params, x, side):
    st = hover_state((x, 15, 1.5), v=(5, 0, 0))
    res = control_step(st, render_from(pillar_scene(), st, intr), [37.5, 15, 1.5], 5.0,
                       mpc_cfg, params)
    moved = res.waypoints.adjusted
    assert moved.any()
    ring_side = np.sign(np.mean(res.waypoints.positions[moved, 1] - 15))
    assert ring_side == side
    assert abs(res.control.a_c[1]) > 0.1
    assert np.sign(res.control.a_c[1]) == ring_side
    assert_shooting_invariant(res.solution, st, mpc_cfg.dt, params)


def test_deterministic(intr, mpc_cfg, params):
    st = hover_state((15, 15.1, 1.5), v=(5, 0, 0))
    frame = render_from(pillar_scene(), st, intr)
    a = control_step(st, frame, [37.5, 15, 1.5], 5.0, mpc_cfg, params)
    b = control_step(st, frame, [37.5, 15, 1.5], 5.0, mpc_cfg, params)
    np.testing.assert_array_equal(a.control.to_vector(), b.control.to_vector())
    np.testing.assert_array_equal(a.solution.inputs, b.solution.inputs)


def test_fallback_returns_clipped_warm_input(intr, mpc_cfg, params, monkeypatch):
    real_solve = pipeline.solve

    def failing(*args, **kwargs):
        sol = real_solve(*args, **kwargs)
        from dataclasses import replace
        return replace(sol, fallback=True)

    captured = {}
    real_warm = pipeline.warm_start

    def spy(*args, **kwargs):
        captured["warm"] = real_warm(*args, **kwargs)
        return captured["warm"]

    monkeypatch.setattr(pipeline, "solve", failing)
    monkeypatch.setattr(pipeline, "warm_start", spy)
    st = hover_state((2.5, 15, 1.5))
    frame = DepthImage(intr, np.full((48, 64), NO_RETURN))
    res = control_step(st, frame, [37.5, 15, 1.5], 3.0, mpc_cfg, params)
    np.testing.assert_array_equal(res.control.to_vector(), params.clip(captured["warm"][1][0]))


def test_planner_keeps_keyframes(intr, mpc_cfg, params):
    planner = Planner(mpc_cfg, params)
    scene = pillar_scene()
    for x in (12.0, 13.0):
        st = hover_state((x, 15, 1.5), v=(3, 0, 0))
        planner.step(st, render_from(scene, st, intr), [37.5, 15, 1.5], 3.0)
    assert len(planner.keyframes.keyframes) >= 1
    planner.reset()
    assert planner.keyframes.keyframes == []


def test_velocity_mode_norm_runs(intr, params):
    cfg = MpcConfig(velocity_weight_mode="norm")
    st = hover_state((15, 15, 1.5), v=(5, 0, 0))
    res = control_step(st, render_from(pillar_scene(), st, intr), [37.5, 15, 1.5], 5.0, cfg, params)
    assert_shooting_invariant(res.solution, st, cfg.dt, params)
