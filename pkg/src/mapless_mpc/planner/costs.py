"""Cost terms of the receding-horizon problem and their derivatives."""

from __future__ import annotations

import logging

import numpy as np
from scipy.special import expit

from ..dynamics import IDX_PHI, NX, QuadState, wrap_angle
from .config import MpcConfig

log = logging.getLogger(__name__)

DIST_EPS = 1e-6


def softplus(z):
    """ln(1 + e^z), overflow safe."""
    return np.logaddexp(0.0, z)


def _as_vec(x) -> np.ndarray:
    if isinstance(x, QuadState):
        return x.to_vector()
    return np.asarray(x, dtype=float)


def _obstacle_array(obstacles) -> np.ndarray:
    if isinstance(obstacles, np.ndarray):
        return obstacles.reshape(-1, 3)
    pts = [np.asarray(o[0] if isinstance(o, tuple) else o, dtype=float) for o in obstacles]
    return np.array(pts, dtype=float).reshape(-1, 3)


def _geometry(p, obs):
    diff = p - obs
    d = np.linalg.norm(diff, axis=-1)
    clamped = d < DIST_EPS
    if np.any(clamped):
        log.debug("obstacle distance below %g clamped", DIST_EPS)
    # unit direction from the true distance; zero only at exact coincidence
    n = np.divide(diff, d[..., None], out=np.zeros_like(diff), where=d[..., None] > 0)
    return n, np.maximum(d, DIST_EPS), int(clamped.sum())


def velocity_weight(v, n, mode: str):
    """Per-obstacle velocity weight; ``n`` are unit vectors obstacle -> vehicle."""
    if mode == "norm":
        return np.broadcast_to(np.linalg.norm(v, axis=-1)[..., None], n.shape[:-1]).copy()
    # closing speed towards the obstacle, zero when moving away
    return np.maximum(0.0, -np.einsum("...j,...ij->...i", v, n))


def collision_cost(p, v, obstacles, cfg: MpcConfig) -> float:
    obs = _obstacle_array(obstacles)
    if len(obs) == 0:
        return 0.0
    n, d, _ = _geometry(np.asarray(p, dtype=float), obs)
    w = velocity_weight(np.asarray(v, dtype=float), n, cfg.velocity_weight_mode)
    return float(cfg.lambda_c * np.sum(w * softplus(cfg.beta * (cfg.r_q - d))))


def collision_cost_gradient(p, v, obstacles, cfg: MpcConfig) -> np.ndarray:
    """Position gradient with the velocity weight held constant."""
    obs = _obstacle_array(obstacles)
    if len(obs) == 0:
        return np.zeros(3)
    n, d, _ = _geometry(np.asarray(p, dtype=float), obs)
    w = velocity_weight(np.asarray(v, dtype=float), n, cfg.velocity_weight_mode)
    coef = -cfg.beta * w * expit(cfg.beta * (cfg.r_q - d))
    return cfg.lambda_c * (coef[:, None] * n).sum(axis=0)


def quadratic_residual(x, x_ref) -> np.ndarray:
    r = _as_vec(x) - _as_vec(x_ref)
    r[..., IDX_PHI] = wrap_angle(r[..., IDX_PHI])
    return r


def terminal_cost(x_H, x_goal, q_goal) -> float:
    r = quadratic_residual(x_H, x_goal)
    return float(r @ (np.asarray(q_goal, dtype=float) * r))


def waypoint_cost(x_h, x_ref, q_wp) -> float:
    r = quadratic_residual(x_h, x_ref)
    return float(r @ (np.asarray(q_wp, dtype=float) * r))


def smoothness_cost(u, q_u) -> float:
    u = np.asarray(u, dtype=float)
    return float(u @ (np.asarray(q_u, dtype=float) * u))


class HorizonObjective:
    """Total cost over the horizon with fixed obstacle correspondences.

    ``refs`` are ``(H, NX)`` waypoint states, ``goal`` the ``NX`` terminal
    target and ``obstacles`` an ``(H, M, 3)`` array (``nan`` rows ignored).
    """

    def __init__(self, refs, goal, obstacles, cfg: MpcConfig):
        self.refs = np.asarray(refs, dtype=float)
        self.goal = np.asarray(goal, dtype=float)
        self.cfg = cfg
        H = len(self.refs)
        if obstacles is None:
            obstacles = np.full((H, 0, 3), np.nan)
        self.obstacles = np.asarray(obstacles, dtype=float)
        self.mask = np.all(np.isfinite(self.obstacles), axis=-1)
        self.degenerate = 0

    def _collision(self, X):
        cfg = self.cfg
        P = X[:, 0:3]
        V = X[:, 4:7]
        obs = np.where(self.mask[..., None], self.obstacles, 0.0)
        n, d, self.degenerate = _geometry(P[:, None, :], obs)
        w = velocity_weight(V, n, cfg.velocity_weight_mode) * self.mask
        z = cfg.beta * (cfg.r_q - d)
        return n, d, w, z

    def terms(self, X, U) -> dict:
        cfg = self.cfg
        R = quadratic_residual(X, self.refs)
        rg = quadratic_residual(X[-1], self.goal)
        out = {
            "collision": 0.0,
            "waypoint": float(np.sum(R * R * cfg.q_wp)),
            "smoothness": float(np.sum(U * U * cfg.q_u)),
            "terminal": float(rg @ (cfg.q_goal * rg)),
        }
        if self.mask.any():
            _, _, w, z = self._collision(X)
            out["collision"] = float(cfg.lambda_c * np.sum(w * softplus(z)))
        return out

    def value(self, X, U) -> float:
        return float(sum(self.terms(X, U).values()))

    def derivatives(self, X, U):
        """Exact gradients w.r.t. states and inputs plus a PSD state Hessian.

        Returns ``(gx, gu, Wx)`` with shapes ``(H, NX)``, ``(H, NU)`` and
        ``(H, NX, NX)``. The collision block of ``Wx`` keeps only the
        positive-semidefinite radial curvature.
        """
        cfg = self.cfg
        H = len(X)
        R = quadratic_residual(X, self.refs)
        gx = 2.0 * cfg.q_wp * R
        Wx = np.zeros((H, NX, NX))
        Wx[:, np.arange(NX), np.arange(NX)] = 2.0 * cfg.q_wp
        rg = quadratic_residual(X[-1], self.goal)
        gx[-1] += 2.0 * cfg.q_goal * rg
        Wx[-1, np.arange(NX), np.arange(NX)] += 2.0 * cfg.q_goal
        gu = 2.0 * cfg.q_u * U
        if self.mask.any():
            n, d, w, z = self._collision(X)
            V = X[:, 4:7]
            sp = softplus(z)
            sig = expit(z)
            lam = cfg.lambda_c
            # d softplus / d p through the distance
            gp = lam * np.sum((-cfg.beta * w * sig)[..., None] * n, axis=1)
            if cfg.velocity_weight_mode == "directional":
                active = (w > 0)[..., None]
                # w = -v.n ; dn/dp = (I - n n^T)/d
                vn = np.einsum("hj,hij->hi", V, n)
                dw_dp = -(V[:, None, :] - vn[..., None] * n) / d[..., None]
                dw_dv = -n
                gp += lam * np.sum(active * sp[..., None] * dw_dp, axis=1)
                gv = lam * np.sum(active * sp[..., None] * dw_dv, axis=1)
            else:
                speed = np.linalg.norm(V, axis=1)
                unit = np.divide(V, speed[:, None], out=np.zeros_like(V),
                                 where=speed[:, None] > 0)
                gv = lam * np.sum(sp * self.mask, axis=1)[:, None] * unit
            gx[:, 0:3] += gp
            gx[:, 4:7] += gv
            curv = lam * w * cfg.beta ** 2 * sig * (1.0 - sig)
            Wx[:, 0:3, 0:3] += np.einsum("hi,hij,hik->hjk", curv, n, n)
        return gx, gu, Wx


def total_cost(states, inputs, refs, trees, cfg: MpcConfig):
    """Horizon cost with obstacles queried at ``states``; returns (total, terms)."""
    from ..perception import query_obstacles_batch

    X = np.array([_as_vec(x) for x in states]) if not isinstance(states, np.ndarray) else states
    U = np.asarray(inputs, dtype=float).reshape(len(X), -1)
    obstacles = None
    if trees is not None:
        obstacles, _ = query_obstacles_batch(trees, X[:, 0:3], cfg.m_nearest)
    obj = HorizonObjective(refs.state_refs(), refs.goal_vector(), obstacles, cfg)
    terms = obj.terms(X, U)
    return sum(terms.values()), terms
