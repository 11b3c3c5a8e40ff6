"""Single-shooting projected Gauss-Newton solver for the horizon problem."""

from __future__ import annotations

import time

import numpy as np

from ..dynamics import NU, ModelParams, QuadState, rollout_array, rollout_sensitivity
from ..perception import DualTrees, query_obstacles_batch
from ..waypoints import WaypointSequence
from .config import MpcConfig, MpcSolution
from .costs import HorizonObjective

ARMIJO_C1 = 1e-4
MAX_BACKTRACKS = 12
REG_REL = 1e-8


def warm_start(adjusted: WaypointSequence, x_init: QuadState, cfg: MpcConfig,
               params: ModelParams):
    """Initial state and input guesses from the (coarse-adjusted) references.

    Velocities and accelerations are finite differences of the reference
    positions; acceleration commands are clamped to the input bounds.
    """
    H = cfg.horizon
    if len(adjusted) != H:
        raise ValueError(f"expected {H} references, got {len(adjusted)}")
    dt = cfg.dt
    P = adjusted.positions
    V = np.diff(np.vstack([x_init.p, P]), axis=0) / dt
    A = np.diff(np.vstack([x_init.v, V]), axis=0) / dt
    A = np.clip(A, params.u_min[:3], params.u_max[:3])
    states = np.hstack([P, adjusted.yaws[:, None], V, A])
    inputs = np.column_stack([A / params.K_a, adjusted.yaws])
    return states, params.clip(inputs)


def _tiled_bounds(params: ModelParams, H: int):
    return np.tile(params.u_min, H), np.tile(params.u_max, H)


def solve(x_init: QuadState, refs: WaypointSequence, trees: DualTrees | None, warm,
          cfg: MpcConfig, params: ModelParams, obstacles=None,
          fov_check: bool = True) -> MpcSolution:
    """Minimise the horizon cost over the input sequence.

    States are always obtained by rolling the inputs through the RK4 model,
    inputs are projected onto their box at every iterate, and only iterates
    that decrease the cost are accepted. Obstacle correspondences are queried
    once at the warm-start state guess (its rollout when none is given) unless ``obstacles`` is given.
    """
    t0 = time.perf_counter()
    H = cfg.horizon
    x0 = x_init.to_vector()
    U = params.clip(np.asarray(warm[1], dtype=float).reshape(H, NU))
    X = rollout_array(x0, U, cfg.dt, params)
    if obstacles is None and trees is not None:
        guess = X if warm[0] is None else np.asarray(warm[0], dtype=float).reshape(H, -1)
        obstacles, _ = query_obstacles_batch(trees, guess[:, 0:3], cfg.m_nearest, fov_check)
    obj = HorizonObjective(refs.state_refs(), refs.goal_vector(), obstacles, cfg)

    J = obj.value(X, U)
    fallback = False
    if not np.isfinite(J):
        fallback = True
        U = params.clip(np.column_stack([np.zeros((H, 3)), refs.yaws]))
        X = rollout_array(x0, U, cfg.dt, params)
        J = obj.value(X, U)
    warm_cost = J
    history = [J]
    lo, hi = _tiled_bounds(params, H)
    u_reg = np.tile(2.0 * cfg.q_u, H)
    iterations = 0

    for _ in range(cfg.max_iter):
        X, S = rollout_sensitivity(x0, U, cfg.dt, params)
        gx, gu, Wx = obj.derivatives(X, U)
        S2 = S.reshape(H * S.shape[1], -1)
        g = S2.T @ gx.ravel() + gu.ravel()
        WS = np.einsum("hij,hjb->hib", Wx, S).reshape(S2.shape)
        Hm = S2.T @ WS
        Hm[np.diag_indices_from(Hm)] += u_reg

        u = U.ravel()
        fixed = ((u <= lo) & (g > 0)) | ((u >= hi) & (g < 0))
        free = ~fixed
        step = np.zeros_like(u)
        if free.any():
            Hf = Hm[np.ix_(free, free)]
            reg = REG_REL * max(np.trace(Hf) / Hf.shape[0], np.finfo(float).tiny)
            Hf[np.diag_indices_from(Hf)] += reg
            try:
                L = np.linalg.cholesky(Hf)
                step[free] = -np.linalg.solve(L.T, np.linalg.solve(L, g[free]))
            except np.linalg.LinAlgError:
                step[free] = -np.linalg.lstsq(Hf, g[free], rcond=None)[0]
        iterations += 1

        alpha = 1.0
        accepted = False
        for _ls in range(MAX_BACKTRACKS):
            u_new = np.clip(u + alpha * step, lo, hi)
            U_new = u_new.reshape(H, NU)
            X_new = rollout_array(x0, U_new, cfg.dt, params)
            J_new = obj.value(X_new, U_new)
            slope = min(float(g @ (u_new - u)), 0.0)
            if np.isfinite(J_new) and J_new <= J + ARMIJO_C1 * slope:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        decrease = J - J_new
        J_prev = J
        U, X, J = U_new, X_new, J_new
        history.append(J)
        if decrease <= cfg.tol * abs(J_prev):
            break

    X = rollout_array(x0, U, cfg.dt, params)
    return MpcSolution(inputs=U, states=X, cost=J, breakdown=obj.terms(X, U),
                       iterations=iterations, solve_time=time.perf_counter() - t0,
                       cost_history=tuple(history), warm_cost=warm_cost, fallback=fallback,
                       degenerate_distances=obj.degenerate,
                       obstacles=obj.obstacles)
