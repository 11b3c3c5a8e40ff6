"""Synthetic forest worlds, raycast depth camera and closed-loop trials."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dynamics import ControlInput, ModelParams, QuadState, rk4_step
from .errors import InvalidInputError, SceneGenerationError
from .perception import (CameraIntrinsics, DepthImage, NO_RETURN, PerceptionConfig, Pose,
                         camera_pose, pixel_rays)
from .planner import MpcConfig, Planner

MAX_REJECTIONS = 10_000


@dataclass(frozen=True)
class Cylinder:
    """Vertical cylinder standing on z = 0."""

    x: float
    y: float
    radius: float
    height: float

    def __post_init__(self):
        if self.radius <= 0 or self.height <= 0:
            raise InvalidInputError("cylinder dimensions must be positive")

    def signed_distance(self, p: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(p)
        dr = np.hypot(p[:, 0] - self.x, p[:, 1] - self.y) - self.radius
        dz = np.maximum(-p[:, 2], p[:, 2] - self.height)
        outside = np.hypot(np.maximum(dr, 0.0), np.maximum(dz, 0.0))
        return np.where((dr <= 0) & (dz <= 0), np.maximum(dr, dz), outside)

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        ox, oy, oz = origin - np.array([self.x, self.y, 0.0])
        dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        best = np.full(len(dirs), np.inf)
        a = dx * dx + dy * dy
        b = 2.0 * (ox * dx + oy * dy)
        c = ox * ox + oy * oy - self.radius ** 2
        disc = b * b - 4.0 * a * c
        ok = (disc >= 0) & (a > 0)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            for t in ((-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)):
                z = oz + t * dz
                hit = ok & (t > 0) & (z >= 0) & (z <= self.height)
                best = np.where(hit & (t < best), t, best)
            for zc in (0.0, self.height):
                t = (zc - oz) / dz
                px, py = ox + t * dx, oy + t * dy
                hit = (dz != 0) & (t > 0) & (px * px + py * py <= self.radius ** 2)
                best = np.where(hit & (t < best), t, best)
        return best


@dataclass(frozen=True)
class Sphere:
    x: float
    y: float
    z: float
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise InvalidInputError("sphere radius must be positive")

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def signed_distance(self, p: np.ndarray) -> np.ndarray:
        return np.linalg.norm(np.atleast_2d(p) - self.center, axis=1) - self.radius

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        o = origin - self.center
        a = np.einsum("ij,ij->i", dirs, dirs)
        b = 2.0 * dirs @ o
        c = o @ o - self.radius ** 2
        disc = b * b - 4.0 * a * c
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t1 = (-b - sq) / (2.0 * a)
        t2 = (-b + sq) / (2.0 * a)
        t = np.where(t1 > 0, t1, t2)
        return np.where(ok & (t > 0), t, np.inf)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by center and half extents."""

    x: float
    y: float
    z: float
    hx: float
    hy: float
    hz: float

    def __post_init__(self):
        if min(self.hx, self.hy, self.hz) <= 0:
            raise InvalidInputError("box half extents must be positive")

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def half(self) -> np.ndarray:
        return np.array([self.hx, self.hy, self.hz])

    def signed_distance(self, p: np.ndarray) -> np.ndarray:
        q = np.abs(np.atleast_2d(p) - self.center) - self.half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return outside + inside

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        lo = self.center - self.half - origin
        hi = self.center + self.half - origin
        d = np.where(np.abs(dirs) < 1e-15, 1e-15, dirs)
        t0 = lo / d
        t1 = hi / d
        tmin = np.minimum(t0, t1).max(axis=1)
        tmax = np.maximum(t0, t1).min(axis=1)
        hit = tmax >= np.maximum(tmin, 0.0)
        t = np.where(tmin > 0, tmin, tmax)
        return np.where(hit & (t > 0), t, np.inf)


Obstacle = Cylinder | Sphere | Box


@dataclass(frozen=True)
class Scene:
    obstacles: tuple
    bounds: np.ndarray
    start: np.ndarray
    goal: np.ndarray
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        object.__setattr__(self, "bounds", np.asarray(self.bounds, dtype=float).reshape(6))
        object.__setattr__(self, "start", np.asarray(self.start, dtype=float).reshape(3))
        object.__setattr__(self, "goal", np.asarray(self.goal, dtype=float).reshape(3))

    def clearance(self, p) -> np.ndarray:
        """Signed distance from each point to the nearest obstacle (inf if none)."""
        p = np.atleast_2d(np.asarray(p, dtype=float))
        if not self.obstacles:
            return np.full(len(p), np.inf)
        return np.min([o.signed_distance(p) for o in self.obstacles], axis=0)


def _normalize_bounds(bounds) -> np.ndarray:
    b = np.asarray(bounds, dtype=float).ravel()
    if b.size == 2:
        b = np.array([0.0, 0.0, 0.0, b[0], b[1], 8.0])
    elif b.size == 4:
        b = np.array([b[0], b[1], 0.0, b[2], b[3], 8.0])
    if b.size != 6 or np.any(b[3:] <= b[:3]):
        raise InvalidInputError(f"invalid bounds {bounds!r}")
    return b


def default_start_goal(bounds, distance: float = 35.0, altitude: float = 1.5):
    b = _normalize_bounds(bounds)
    length = b[3] - b[0]
    dist = min(distance, 0.8 * length)
    xc, yc = 0.5 * (b[0] + b[3]), 0.5 * (b[1] + b[4])
    z = b[2] + altitude
    return np.array([xc - dist / 2, yc, z]), np.array([xc + dist / 2, yc, z])


def generate_forest(bounds, density: float, seed: int, start=None, goal=None,
                    radius_range=(0.15, 0.40), clearance: float = 1.5) -> Scene:
    """Uniformly scattered vertical trees at ``density`` trees per square meter."""
    if density < 0:
        raise InvalidInputError("density must be non-negative")
    b = _normalize_bounds(bounds)
    if start is None or goal is None:
        s, g = default_start_goal(b)
        start = s if start is None else start
        goal = g if goal is None else goal
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    area = (b[3] - b[0]) * (b[4] - b[1])
    count = int(round(area * density))
    rng = np.random.default_rng(seed)
    height = b[5] - b[2]
    trees = []
    rejections = 0
    while len(trees) < count:
        x = rng.uniform(b[0], b[3])
        y = rng.uniform(b[1], b[4])
        r = rng.uniform(*radius_range)
        near = min(np.hypot(x - start[0], y - start[1]), np.hypot(x - goal[0], y - goal[1])) - r
        if near < clearance:
            rejections += 1
            if rejections > MAX_REJECTIONS:
                raise SceneGenerationError(
                    f"could not place {count} trees with {clearance} m start/goal clearance")
            continue
        trees.append(Cylinder(float(x), float(y), float(r), float(height)))
    return Scene(obstacles=trees, bounds=b, start=start, goal=goal, seed=seed)


def render_depth(scene: Scene, pose: Pose, intrinsics: CameraIntrinsics,
                 max_range: float = 10.0, noise_sigma: float = 0.0,
                 rng: np.random.Generator | int | None = None,
                 timestamp: float = 0.0) -> DepthImage:
    """Z-depth image by exact ray casting against the scene primitives."""
    rays_cam = pixel_rays(intrinsics).reshape(-1, 3)
    dirs = rays_cam @ pose.rotation.T
    depth = np.full(len(dirs), np.inf)
    for ob in scene.obstacles:
        depth = np.minimum(depth, ob.intersect(pose.translation, dirs))
    depth[depth > max_range] = NO_RETURN
    if noise_sigma > 0:
        rng = np.random.default_rng(rng)
        valid = np.isfinite(depth)
        depth[valid] = np.maximum(depth[valid] + rng.normal(0.0, noise_sigma, valid.sum()), 1e-3)
    return DepthImage(intrinsics, depth.reshape(intrinsics.height, intrinsics.width),
                      pose=pose, timestamp=timestamp, max_range=max_range)


def check_collision(scene: Scene, p, quad_radius: float = 0.1) -> bool:
    return bool(np.any(scene.clearance(p) < quad_radius))


@dataclass(frozen=True)
class TrialConfig:
    v_des: float = 3.0
    success_radius: float = 5.0
    quad_radius: float = 0.1
    timeout: float | None = None
    control_rate: float = 30.0
    depth_noise: float = 0.0
    pos_noise: float = 0.0
    edge_tree: bool = True
    multi_frame: bool = True
    m_nearest: int | None = None
    perturb_model: bool = False
    max_range: float = 10.0
    width: int = 64
    height: int = 48
    hfov_deg: float = 87.0
    seed: int = 0

    def __post_init__(self):
        if self.v_des <= 0 or self.control_rate <= 0:
            raise InvalidInputError("v_des and control_rate must be positive")
        if self.success_radius <= 0 or self.quad_radius <= 0 or self.max_range <= 0:
            raise InvalidInputError("radii and max_range must be positive")
        if self.depth_noise < 0 or self.pos_noise < 0:
            raise InvalidInputError("noise levels must be non-negative")

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.from_fov(self.width, self.height, self.hfov_deg)


@dataclass
class TrialResult:
    success: bool
    collided: bool
    timed_out: bool
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    solve_ms: np.ndarray
    iterations: np.ndarray
    min_clearance: float
    mean_speed: float
    forward_speeds: np.ndarray
    fallbacks: int = 0
    diagnostics: list = field(default_factory=list)

    @property
    def outcome(self) -> str:
        if self.success:
            return "success"
        return "collision" if self.collided else "timeout"

    @property
    def trajectory(self) -> list[tuple[float, QuadState]]:
        return [(float(t), QuadState.from_vector(x)) for t, x in zip(self.times, self.states)]

    def summary(self) -> str:
        return (f"result={self.outcome} min_clearance={self.min_clearance:.4f} "
                f"mean_speed={self.mean_speed:.4f}")


def _segment_collides(scene: Scene, p0, p1, radius: float) -> bool:
    n = max(1, int(math.ceil(np.linalg.norm(p1 - p0) / (0.25 * radius))))
    s = np.linspace(0.0, 1.0, n + 1)[1:, None]
    return check_collision(scene, p0 + s * (p1 - p0), radius)


def run_trial(scene: Scene, trial: TrialConfig, mpc: MpcConfig | None = None,
              params: ModelParams | None = None,
              perception: PerceptionConfig | None = None,
              keep_diagnostics: bool = True) -> TrialResult:
    """Closed-loop flight from ``scene.start`` until success, collision or timeout."""
    mpc = mpc or MpcConfig()
    params = params or ModelParams()
    perception = perception or PerceptionConfig()
    if trial.m_nearest is not None:
        mpc = replace(mpc, m_nearest=trial.m_nearest)
    perception = replace(perception, width=trial.width, height=trial.height,
                         edge_tree=trial.edge_tree, multi_frame=trial.multi_frame)
    rng = np.random.default_rng([int(scene.seed), int(trial.seed)])
    sim_params = params.perturbed(rng) if trial.perturb_model else params
    planner = Planner(mpc, params, perception)
    intr = trial.intrinsics
    dt = 1.0 / trial.control_rate

    start, goal = scene.start, scene.goal
    heading = goal - start
    dist = float(np.linalg.norm(heading))
    unit = heading / dist if dist > 0 else np.array([1.0, 0.0, 0.0])
    timeout = trial.timeout if trial.timeout is not None else 3.0 * dist / trial.v_des
    x = QuadState(p=start, phi=math.atan2(unit[1], unit[0]))

    times, states, controls, solve_ms, iters, diag = [0.0], [x.to_vector()], [], [], [], []
    fallbacks = 0
    collided = check_collision(scene, x.p, trial.quad_radius)
    success = timed_out = False
    t = 0.0
    tick = 0
    while not collided:
        if np.linalg.norm(goal - x.p) <= trial.success_radius:
            success = True
            break
        if t >= timeout - 1e-9:
            timed_out = True
            break
        p_meas = x.p + (rng.normal(0.0, trial.pos_noise, 3) if trial.pos_noise > 0 else 0.0)
        x_meas = replace(x, p=p_meas)
        frame = render_depth(scene, camera_pose(x.p, x.phi), intr, trial.max_range,
                             trial.depth_noise, rng, timestamp=t)
        frame = replace(frame, pose=camera_pose(p_meas, x.phi))
        step = planner.step(x_meas, frame, goal, trial.v_des)
        u = step.control
        fallbacks += int(step.solution.fallback)
        x_next = rk4_step(x, u, dt, sim_params)
        collided = _segment_collides(scene, x.p, x_next.p, trial.quad_radius)
        x = x_next
        t = (tick + 1) * dt
        tick += 1
        times.append(t)
        states.append(x.to_vector())
        controls.append(u.to_vector())
        solve_ms.append(step.solution.solve_time * 1e3)
        iters.append(step.solution.iterations)
        if keep_diagnostics:
            diag.append({
                "tick": tick - 1,
                "solve_ms": step.solution.solve_time * 1e3,
                "step_ms": step.wall_time * 1e3,
                "iterations": step.solution.iterations,
                "costs": step.solution.breakdown,
                "min_obstacle_distance": step.min_obstacle_distance(),
                "u1": u.to_vector().tolist(),
            })

    S = np.array(states)
    clearance = float(np.min(scene.clearance(S[:, 0:3]))) if scene.obstacles else math.inf
    fwd = S[1:, 4:7] @ unit if len(S) > 1 else np.zeros(0)
    return TrialResult(success=success, collided=collided, timed_out=timed_out,
                       times=np.array(times), states=S,
                       controls=np.array(controls).reshape(-1, 4),
                       solve_ms=np.array(solve_ms), iterations=np.array(iters),
                       min_clearance=clearance,
                       mean_speed=float(fwd.mean()) if fwd.size else 0.0,
                       forward_speeds=fwd, fallbacks=fallbacks, diagnostics=diag)


TRAJECTORY_HEADER = "t,px,py,pz,phi,vx,vy,vz,ax,ay,az,u1x,u1y,u1z,u1phi"


def write_trajectory_csv(result: TrialResult, path) -> None:
    """One row per state plus the control applied from it (empty on the last row).

    Wall-clock timings are left to the diagnostics stream so the file is
    bit-reproducible for fixed seeds.
    """
    n = len(result.states)
    U = np.full((n, 4), np.nan)
    U[: len(result.controls)] = result.controls
    lines = [TRAJECTORY_HEADER]
    for i in range(n):
        row = [result.times[i], *result.states[i], *U[i]]
        lines.append(",".join("" if not np.isfinite(v) else repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass(frozen=True)
class Ablation:
    name: str = "baseline"
    edge_tree: bool = True
    multi_frame: bool = True
    m_nearest: int | None = None
    depth_noise: float = 0.0
    pos_noise: float = 0.0

    def apply(self, trial: TrialConfig) -> TrialConfig:
        return replace(trial, edge_tree=self.edge_tree, multi_frame=self.multi_frame,
                       m_nearest=self.m_nearest if self.m_nearest is not None else trial.m_nearest,
                       depth_noise=self.depth_noise, pos_noise=self.pos_noise)


ABLATIONS = {
    "baseline": Ablation("baseline"),
    "no-edge": Ablation("no-edge", edge_tree=False),
    "single-frame": Ablation("single-frame", multi_frame=False),
    "single-nearest": Ablation("single-nearest", m_nearest=1),
    "noisy": Ablation("noisy", depth_noise=0.05, pos_noise=0.05),
}


@dataclass
class BenchmarkRow:
    speed: float
    ablation: str
    success_rate: float
    mean_speed: float
    p25_speed: float
    p75_speed: float
    mean_solve_ms: float
    mean_iters: float
    n_trials: int
    outcomes: list = field(default_factory=list)

    CSV_FIELDS = ("speed", "ablation", "success_rate", "mean_speed", "p25_speed",
                  "p75_speed", "mean_solve_ms", "mean_iters")


def _run_cell_trial(args):
    scene, trial, mpc, params, perception = args
    r = run_trial(scene, trial, mpc, params, perception, keep_diagnostics=False)
    return r.outcome, r.forward_speeds, r.solve_ms, r.iterations


def run_benchmark(scenes: list[Scene], speeds, trials_per_cell: int, ablations=None,
                  mpc: MpcConfig | None = None, params: ModelParams | None = None,
                  perception: PerceptionConfig | None = None,
                  base_trial: TrialConfig | None = None, workers: int = 1,
                  progress=None) -> list[BenchmarkRow]:
    """Success rate and speed statistics for every (speed, ablation) cell.

    Trial ``i`` of a cell flies ``scenes[i % len(scenes)]`` with trial seed
    ``i``, so all cells see the same scene/seed pairs.
    """
    if trials_per_cell <= 0 or not scenes or not len(speeds):
        return []
    ablations = [ABLATIONS["baseline"]] if ablations is None else [
        ABLATIONS[a] if isinstance(a, str) else a for a in ablations]
    base_trial = base_trial or TrialConfig()
    jobs = []
    for speed in speeds:
        for ab in ablations:
            for i in range(trials_per_cell):
                trial = replace(ab.apply(base_trial), v_des=float(speed), seed=i)
                jobs.append(((float(speed), ab.name), (scenes[i % len(scenes)], trial, mpc,
                                                       params, perception)))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_run_cell_trial, [j[1] for j in jobs]))
    else:
        outputs = []
        for key, args in jobs:
            outputs.append(_run_cell_trial(args))
            if progress is not None:
                progress(key, outputs[-1][0])
    cells: dict = {}
    for (key, _), out in zip(jobs, outputs):
        cells.setdefault(key, []).append(out)
    rows = []
    for speed in speeds:
        for ab in ablations:
            outs = cells[(float(speed), ab.name)]
            fwd = np.concatenate([o[1] for o in outs]) if outs else np.zeros(0)
            ms = np.concatenate([o[2] for o in outs])
            it = np.concatenate([o[3] for o in outs])
            rows.append(BenchmarkRow(
                speed=float(speed), ablation=ab.name,
                success_rate=float(np.mean([o[0] == "success" for o in outs])),
                mean_speed=float(fwd.mean()) if fwd.size else 0.0,
                p25_speed=float(np.percentile(fwd, 25)) if fwd.size else 0.0,
                p75_speed=float(np.percentile(fwd, 75)) if fwd.size else 0.0,
                mean_solve_ms=float(ms.mean()) if ms.size else 0.0,
                mean_iters=float(it.mean()) if it.size else 0.0,
                n_trials=len(outs), outcomes=[o[0] for o in outs]))
    return rows


def write_results_csv(rows: list[BenchmarkRow], path) -> None:
    lines = [",".join(BenchmarkRow.CSV_FIELDS)]
    for r in rows:
        lines.append(",".join([repr(r.speed), r.ablation] + [
            repr(float(getattr(r, f))) for f in BenchmarkRow.CSV_FIELDS[2:]]))
    Path(path).write_text("\n".join(lines) + "\n")


def write_scene(scene: Scene, path) -> None:
    def fmt(vals):
        return " ".join(repr(float(v)) for v in vals)

    lines = [f"bounds {fmt(scene.bounds)}", f"start {fmt(scene.start)}",
             f"goal {fmt(scene.goal)}", f"seed {int(scene.seed)}"]
    for ob in scene.obstacles:
        if isinstance(ob, Cylinder):
            lines.append(f"cyl {fmt([ob.x, ob.y, ob.radius, ob.height])}")
        elif isinstance(ob, Sphere):
            lines.append(f"sph {fmt([ob.x, ob.y, ob.z, ob.radius])}")
        else:
            lines.append(f"box {fmt([ob.x, ob.y, ob.z, ob.hx, ob.hy, ob.hz])}")
    Path(path).write_text("\n".join(lines) + "\n")


_OBSTACLE_KINDS = {"cyl": (Cylinder, 4), "sph": (Sphere, 4), "box": (Box, 6)}
_KEYS = {"bounds": 6, "start": 3, "goal": 3, "seed": 1}


def read_scene(path) -> Scene:
    """Parse a scene file; errors name the offending line and field."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"scene file not found: {path}")
    fields: dict = {}
    obstacles = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *vals = line.split()
        where = f"{path}:{lineno}"
        if key in _KEYS:
            if len(vals) != _KEYS[key]:
                raise InvalidInputError(f"{where}: '{key}' expects {_KEYS[key]} values")
            try:
                fields[key] = int(vals[0]) if key == "seed" else [float(v) for v in vals]
            except ValueError as exc:
                raise InvalidInputError(f"{where}: bad number in '{key}': {exc}") from None
        elif key in _OBSTACLE_KINDS:
            cls, n = _OBSTACLE_KINDS[key]
            if len(vals) != n:
                raise InvalidInputError(f"{where}: '{key}' expects {n} values")
            try:
                obstacles.append(cls(*[float(v) for v in vals]))
            except ValueError as exc:
                raise InvalidInputError(f"{where}: invalid '{key}': {exc}") from None
        else:
            raise InvalidInputError(f"{where}: unknown field '{key}'")
    for key in ("bounds", "start", "goal"):
        if key not in fields:
            raise InvalidInputError(f"{path}: missing '{key}'")
    return Scene(obstacles=obstacles, bounds=fields["bounds"], start=fields["start"],
                 goal=fields["goal"], seed=fields.get("seed", 0))
