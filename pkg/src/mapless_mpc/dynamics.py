"""Point-mass quadrotor model with first-order actuator and yaw response.

State vector layout (10): ``[px, py, pz, phi, vx, vy, vz, ax, ay, az]``.
Input vector layout (4): ``[acx, acy, acz, phi_c]``. Everything is expressed
in the inertial frame; ``a_c`` is net (gravity-compensated) acceleration, so
hover is ``a_c = 0``.

The numba kernels below are the only implementation of the model: the MPC
prediction, the sensitivities used by the solver and the simulator's ground
truth all go through them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from .errors import InvalidInputError

NX = 10
NU = 4
IDX_P = slice(0, 3)
IDX_PHI = 3
IDX_V = slice(4, 7)
IDX_A = slice(7, 10)


def wrap_angle(phi):
    """Wrap an angle (scalar or array) into (-pi, pi]."""
    return math.pi - np.mod(math.pi - np.asarray(phi, dtype=float), 2 * math.pi)


@numba.njit(cache=True)
def _wrap(phi):
    w = math.pi - ((math.pi - phi) % (2.0 * math.pi))
    return w


@dataclass(frozen=True)
class QuadState:
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    phi: float = 0.0
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    a: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "p", np.asarray(self.p, dtype=float).reshape(3))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float).reshape(3))
        object.__setattr__(self, "a", np.asarray(self.a, dtype=float).reshape(3))
        object.__setattr__(self, "phi", float(wrap_angle(self.phi)))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.p, [self.phi], self.v, self.a])

    @classmethod
    def from_vector(cls, x) -> QuadState:
        x = np.asarray(x, dtype=float)
        return cls(p=x[0:3], phi=x[3], v=x[4:7], a=x[7:10])


@dataclass(frozen=True)
class ControlInput:
    a_c: np.ndarray = field(default_factory=lambda: np.zeros(3))
    phi_c: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "a_c", np.asarray(self.a_c, dtype=float).reshape(3))
        object.__setattr__(self, "phi_c", float(self.phi_c))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.a_c, [self.phi_c]])

    @classmethod
    def from_vector(cls, u) -> ControlInput:
        u = np.asarray(u, dtype=float)
        return cls(a_c=u[0:3], phi_c=u[3])


def _vec3(value):
    return np.asarray(value, dtype=float).reshape(3)


@dataclass(frozen=True)
class ModelParams:
    """Identified model constants and input bounds.

    ``D``, ``K_a`` and ``tau_a`` are the diagonals of the damping, gain and
    time-constant matrices.
    """

    D: np.ndarray = field(default_factory=lambda: np.array([0.10, 0.10, 0.20]))
    K_a: np.ndarray = field(default_factory=lambda: np.ones(3))
    tau_a: np.ndarray = field(default_factory=lambda: np.full(3, 0.15))
    k_phi: float = 1.0
    tau_phi: float = 0.3
    u_min: np.ndarray = field(
        default_factory=lambda: np.array([-12.0, -12.0, -8.0, -np.inf]))
    u_max: np.ndarray = field(
        default_factory=lambda: np.array([12.0, 12.0, 15.0, np.inf]))
    g: float = 9.81

    def __post_init__(self):
        for name in ("D", "K_a", "tau_a"):
            object.__setattr__(self, name, _vec3(getattr(self, name)))
        object.__setattr__(self, "u_min", np.asarray(self.u_min, dtype=float).reshape(NU))
        object.__setattr__(self, "u_max", np.asarray(self.u_max, dtype=float).reshape(NU))
        if np.any(self.tau_a <= 0):
            raise ValueError("tau_a must be > 0")
        if self.tau_phi <= 0:
            raise ValueError("tau_phi must be > 0")
        if np.any(self.u_min >= self.u_max):
            raise ValueError("u_min must be strictly below u_max")

    def packed(self) -> np.ndarray:
        """Flat parameter vector consumed by the compiled kernels."""
        return np.concatenate([self.D, self.K_a, self.tau_a,
                               [self.k_phi, self.tau_phi]])

    def clip(self, u: np.ndarray) -> np.ndarray:
        return np.clip(u, self.u_min, self.u_max)

    def perturbed(self, rng: np.random.Generator, fraction: float = 0.2) -> ModelParams:
        """Copy with D, K_a, tau_a, k_phi, tau_phi scaled by U[1-f, 1+f]."""
        def scale(n):
            return rng.uniform(1.0 - fraction, 1.0 + fraction, n)
        return replace(self, D=self.D * scale(3), K_a=self.K_a * scale(3),
                       tau_a=self.tau_a * scale(3),
                       k_phi=self.k_phi * scale(1)[0],
                       tau_phi=self.tau_phi * scale(1)[0])


@numba.njit(cache=True)
def _deriv(x, u, prm, out):
    phi = x[3]
    c = math.cos(phi)
    s = math.sin(phi)
    dx = prm[0]
    dy = prm[1]
    dz = prm[2]
    # R^T D R with R the world-to-body yaw rotation, i.e. Rz(phi) D Rz(phi)^T
    m00 = dx * c * c + dy * s * s
    m01 = (dx - dy) * c * s
    m11 = dx * s * s + dy * c * c
    vx = x[4]
    vy = x[5]
    vz = x[6]
    out[0] = vx
    out[1] = vy
    out[2] = vz
    out[3] = (prm[9] * u[3] - phi) / prm[10]
    out[4] = x[7] - (m00 * vx + m01 * vy)
    out[5] = x[8] - (m01 * vx + m11 * vy)
    out[6] = x[9] - dz * vz
    for i in range(3):
        out[7 + i] = (prm[3 + i] * u[i] - x[7 + i]) / prm[6 + i]


@numba.njit(cache=True)
def _jac(x, prm, A):
    """Jacobian of the derivative w.r.t. the state (input Jacobian is constant)."""
    for i in range(NX):
        for j in range(NX):
            A[i, j] = 0.0
    phi = x[3]
    c = math.cos(phi)
    s = math.sin(phi)
    dx = prm[0]
    dy = prm[1]
    m00 = dx * c * c + dy * s * s
    m01 = (dx - dy) * c * s
    m11 = dx * s * s + dy * c * c
    dm00 = 2.0 * (dy - dx) * c * s
    dm01 = (dx - dy) * (c * c - s * s)
    dm11 = -dm00
    vx = x[4]
    vy = x[5]
    A[0, 4] = 1.0
    A[1, 5] = 1.0
    A[2, 6] = 1.0
    A[3, 3] = -1.0 / prm[10]
    A[4, 3] = -(dm00 * vx + dm01 * vy)
    A[5, 3] = -(dm01 * vx + dm11 * vy)
    A[4, 4] = -m00
    A[4, 5] = -m01
    A[5, 4] = -m01
    A[5, 5] = -m11
    A[6, 6] = -prm[2]
    for i in range(3):
        A[4 + i, 7 + i] = 1.0
        A[7 + i, 7 + i] = -1.0 / prm[6 + i]


@numba.njit(cache=True)
def _input_jac(prm):
    B = np.zeros((NX, NU))
    B[3, 3] = prm[9] / prm[10]
    for i in range(3):
        B[7 + i, i] = prm[3 + i] / prm[6 + i]
    return B


@numba.njit(cache=True)
def _rk4(x, u, dt, prm, out):
    k1 = np.empty(NX)
    k2 = np.empty(NX)
    k3 = np.empty(NX)
    k4 = np.empty(NX)
    tmp = np.empty(NX)
    _deriv(x, u, prm, k1)
    for i in range(NX):
        tmp[i] = x[i] + 0.5 * dt * k1[i]
    _deriv(tmp, u, prm, k2)
    for i in range(NX):
        tmp[i] = x[i] + 0.5 * dt * k2[i]
    _deriv(tmp, u, prm, k3)
    for i in range(NX):
        tmp[i] = x[i] + dt * k3[i]
    _deriv(tmp, u, prm, k4)
    for i in range(NX):
        out[i] = x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    out[3] = _wrap(out[3])


@numba.njit(cache=True)
def _rollout(x0, U, dt, prm):
    H = U.shape[0]
    X = np.empty((H, NX))
    x = x0.copy()
    for h in range(H):
        _rk4(x, U[h], dt, prm, X[h])
        x = X[h]
    return X


@numba.njit(cache=True)
def _rk4_with_jac(x, u, dt, prm, out, Ax, Bu):
    """One RK4 step plus its exact Jacobians w.r.t. x and u."""
    B = _input_jac(prm)
    eye = np.eye(NX)
    k1 = np.empty(NX)
    k2 = np.empty(NX)
    k3 = np.empty(NX)
    k4 = np.empty(NX)
    tmp = np.empty(NX)
    J = np.empty((NX, NX))

    _deriv(x, u, prm, k1)
    _jac(x, prm, J)
    K1x = J.copy()
    K1u = B.copy()

    for i in range(NX):
        tmp[i] = x[i] + 0.5 * dt * k1[i]
    _deriv(tmp, u, prm, k2)
    _jac(tmp, prm, J)
    K2x = J @ (eye + 0.5 * dt * K1x)
    K2u = J @ (0.5 * dt * K1u) + B

    for i in range(NX):
        tmp[i] = x[i] + 0.5 * dt * k2[i]
    _deriv(tmp, u, prm, k3)
    _jac(tmp, prm, J)
    K3x = J @ (eye + 0.5 * dt * K2x)
    K3u = J @ (0.5 * dt * K2u) + B

    for i in range(NX):
        tmp[i] = x[i] + dt * k3[i]
    _deriv(tmp, u, prm, k4)
    _jac(tmp, prm, J)
    K4x = J @ (eye + dt * K3x)
    K4u = J @ (dt * K3u) + B

    for i in range(NX):
        out[i] = x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    out[3] = _wrap(out[3])
    Ax[:, :] = eye + dt / 6.0 * (K1x + 2.0 * K2x + 2.0 * K3x + K4x)
    Bu[:, :] = dt / 6.0 * (K1u + 2.0 * K2u + 2.0 * K3u + K4u)


@numba.njit(cache=True)
def _rollout_sensitivity(x0, U, dt, prm):
    """Rollout plus the stacked sensitivity S[h] = d x_{h+1} / d u (NX x H*NU)."""
    H = U.shape[0]
    X = np.empty((H, NX))
    S = np.zeros((H, NX, H * NU))
    Ax = np.empty((NX, NX))
    Bu = np.empty((NX, NU))
    x = x0.copy()
    for h in range(H):
        _rk4_with_jac(x, U[h], dt, prm, X[h], Ax, Bu)
        if h > 0:
            S[h, :, : h * NU] = Ax @ np.ascontiguousarray(S[h - 1, :, : h * NU])
        S[h, :, h * NU:(h + 1) * NU] = Bu
        x = X[h]
    return X, S


def derivative(x: QuadState, u: ControlInput, params: ModelParams) -> np.ndarray:
    """Time derivative of the 10-dimensional state vector."""
    out = np.empty(NX)
    _deriv(x.to_vector(), u.to_vector(), params.packed(), out)
    return out


def rk4_step(x: QuadState, u: ControlInput, dt: float, params: ModelParams) -> QuadState:
    if dt <= 0:
        raise InvalidInputError(f"dt must be positive, got {dt}")
    out = np.empty(NX)
    _rk4(x.to_vector(), u.to_vector(), float(dt), params.packed(), out)
    return QuadState.from_vector(out)


def rk4_step_vec(x: np.ndarray, u: np.ndarray, dt: float, params: ModelParams) -> np.ndarray:
    out = np.empty(NX)
    _rk4(np.asarray(x, dtype=float), np.asarray(u, dtype=float), float(dt),
         params.packed(), out)
    return out


def rollout_array(x0: np.ndarray, U: np.ndarray, dt: float, params: ModelParams) -> np.ndarray:
    """Array form of :func:`rollout`: ``(H, NU)`` inputs to ``(H, NX)`` states."""
    U = np.ascontiguousarray(np.asarray(U, dtype=float).reshape(-1, NU))
    return _rollout(np.asarray(x0, dtype=float), U, float(dt), params.packed())


def rollout_sensitivity(x0: np.ndarray, U: np.ndarray, dt: float, params: ModelParams):
    U = np.ascontiguousarray(np.asarray(U, dtype=float).reshape(-1, NU))
    return _rollout_sensitivity(np.asarray(x0, dtype=float), U, float(dt),
                                params.packed())


def rollout(x0: QuadState, inputs: list[ControlInput], dt: float,
            params: ModelParams) -> list[QuadState]:
    """States after each input; element 0 is the state after the first step."""
    U = np.array([u.to_vector() for u in inputs]).reshape(-1, NU)
    X = rollout_array(x0.to_vector(), U, dt, params)
    return [QuadState.from_vector(x) for x in X]
