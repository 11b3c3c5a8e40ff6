"""Depth-frame processing: obstacle and edge KD-trees, keyframes, waypoint fixes.

Depth images hold z-depth in meters with ``np.inf`` marking pixels without a
return. The camera frame is x right, y down, z forward; a level camera is
mounted along the body x axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dynamics import QuadState
from .errors import InvalidInputError
from .spatial import KdTree
from .waypoints import WaypointSequence

NO_RETURN = np.inf

# columns are the camera axes expressed in the body frame (x fwd, y left, z up)
_BODY_FROM_CAMERA = np.array([[0.0, 0.0, 1.0],
                              [-1.0, 0.0, 0.0],
                              [0.0, -1.0, 0.0]])


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidInputError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width: int = 64, height: int = 48, hfov_deg: float = 87.0):
        f = (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
        return cls(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0, width=width, height=height)


@dataclass(frozen=True)
class Pose:
    """Rigid camera-to-world transform."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    def to_world(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.rotation.T + self.translation

    def to_camera(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts, dtype=float) - self.translation) @ self.rotation


def camera_pose(position, yaw: float) -> Pose:
    """Pose of a level forward-looking camera on a vehicle at ``position``/``yaw``."""
    c, s = math.cos(yaw), math.sin(yaw)
    rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return Pose(rz @ _BODY_FROM_CAMERA, position)


@dataclass(frozen=True)
class DepthImage:
    intrinsics: CameraIntrinsics
    depths: np.ndarray
    pose: Pose = field(default_factory=Pose)
    timestamp: float = 0.0
    max_range: float = 10.0

    def __post_init__(self):
        d = np.asarray(self.depths, dtype=float)
        if d.shape != (self.intrinsics.height, self.intrinsics.width):
            raise InvalidInputError(
                f"depth grid {d.shape} does not match intrinsics "
                f"{(self.intrinsics.height, self.intrinsics.width)}")
        object.__setattr__(self, "depths", d)

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.depths) & (self.depths > 0) & (self.depths <= self.max_range)


@dataclass(frozen=True)
class EdgeMask:
    mask: np.ndarray
    depths: np.ndarray

    @property
    def count(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class CloudFrame:
    points: np.ndarray
    pose: Pose
    timestamp: float = 0.0
    is_keyframe: bool = False
    tree: KdTree = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        if self.tree is None:
            object.__setattr__(self, "tree", KdTree(pts))


@dataclass(frozen=True)
class PerceptionConfig:
    width: int = 64
    height: int = 48
    safety_distance: float = 0.15
    dt: float = 0.033
    min_forward_speed: float = 1.0
    edge_threshold: float = 0.3
    tau_diff: float = 0.5
    rho_new: float = 0.3
    tau_prune: float = 0.1
    multi_frame: bool = True
    edge_tree: bool = True


@dataclass(frozen=True)
class DualTrees:
    """Immutable per-frame snapshot consumed by the planner."""

    obstacle_current: KdTree
    keyframes: tuple
    edge: KdTree
    frame: DepthImage
    dilated: DepthImage
    kernel: int

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return self.frame.intrinsics

    @property
    def pose(self) -> Pose:
        return self.frame.pose


def downsample(image: DepthImage, target_w: int, target_h: int) -> DepthImage:
    """Block-minimum downsampling; keeps the nearest surface of each block."""
    intr = image.intrinsics
    W, H = intr.width, intr.height
    if target_w > W or target_h > H or target_w < 1 or target_h < 1:
        raise InvalidInputError(f"cannot downsample {W}x{H} to {target_w}x{target_h}")
    d = np.where(image.valid, image.depths, NO_RETURN)
    if W % target_w == 0 and H % target_h == 0:
        bh, bw = H // target_h, W // target_w
        out = d.reshape(target_h, bh, target_w, bw).min(axis=(1, 3))
    else:
        out = np.empty((target_h, target_w))
        r0 = np.floor(np.arange(target_h) * H / target_h).astype(int)
        r1 = np.ceil(np.arange(1, target_h + 1) * H / target_h).astype(int)
        c0 = np.floor(np.arange(target_w) * W / target_w).astype(int)
        c1 = np.ceil(np.arange(1, target_w + 1) * W / target_w).astype(int)
        for i in range(target_h):
            rows = d[r0[i]:r1[i]]
            for j in range(target_w):
                out[i, j] = rows[:, c0[j]:c1[j]].min()
    sx, sy = target_w / W, target_h / H
    new_intr = CameraIntrinsics(fx=intr.fx * sx, fy=intr.fy * sy,
                                cx=(intr.cx + 0.5) * sx - 0.5, cy=(intr.cy + 0.5) * sy - 0.5,
                                width=target_w, height=target_h)
    return replace(image, intrinsics=new_intr, depths=out)


def inflation_radius(d_s: float, v_f: float, dt: float, f_pix: float) -> int:
    """Odd dilation kernel size in pixels for safety distance ``d_s``."""
    if v_f <= 0 or dt <= 0 or f_pix <= 0:
        raise InvalidInputError("v_f, dt and f_pix must be positive")
    if d_s < 0:
        raise InvalidInputError("d_s must be non-negative")
    return 2 * math.floor(0.5 * (d_s / (v_f * dt)) * f_pix) + 1


def dilate(image: DepthImage, kernel: int) -> DepthImage:
    """Min-filter the depth map so near obstacles grow by ``kernel // 2`` pixels."""
    if kernel < 1 or kernel % 2 == 0:
        raise InvalidInputError(f"kernel must be odd and >= 1, got {kernel}")
    d = np.where(image.valid, image.depths, NO_RETURN)
    if kernel == 1:
        return replace(image, depths=d)
    # 'nearest' padding repeats border pixels already inside the window, so the
    # result equals a minimum over the in-image part of each window
    out = ndimage.minimum_filter(d, size=kernel, mode="nearest")
    return replace(image, depths=out)


def edge_filter(dilated: DepthImage, threshold: float = 0.3) -> EdgeMask:
    """Flag the near side of every 4-neighbour depth jump larger than ``threshold``."""
    d = np.where(dilated.valid, dilated.depths, NO_RETURN)
    mask = np.zeros(d.shape, dtype=bool)
    with np.errstate(invalid="ignore"):
        jump = d[1:, :] - d[:-1, :]
        mask[:-1, :] |= jump > threshold
        mask[1:, :] |= -jump > threshold
        jump = d[:, 1:] - d[:, :-1]
        mask[:, :-1] |= jump > threshold
        mask[:, 1:] |= -jump > threshold
    mask &= np.isfinite(d)
    return EdgeMask(mask=mask, depths=np.where(mask, d, NO_RETURN))


def pixel_rays(intr: CameraIntrinsics) -> np.ndarray:
    """Camera-frame ray per pixel scaled to unit z, shape ``(H, W, 3)``."""
    v, u = np.mgrid[0:intr.height, 0:intr.width].astype(float)
    return np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy,
                     np.ones_like(u)], axis=-1)


def deproject(image: DepthImage, mask: EdgeMask | None = None) -> np.ndarray:
    """World-frame points of the valid (and, with ``mask``, flagged) pixels."""
    intr = image.intrinsics
    if mask is None:
        depths = image.depths
        sel = image.valid
    else:
        depths = mask.depths
        sel = mask.mask & np.isfinite(depths) & (depths > 0)
    v, u = np.nonzero(sel)
    d = depths[v, u]
    cam = np.column_stack([(u - intr.cx) * d / intr.fx, (v - intr.cy) * d / intr.fy, d])
    return image.pose.to_world(cam)


def project(intr: CameraIntrinsics, pose: Pose, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest pixel column/row and z-depth of world points."""
    cam = pose.to_camera(np.asarray(points, dtype=float).reshape(-1, 3))
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(z > 0, intr.fx * cam[:, 0] / z + intr.cx, -1.0)
        v = np.where(z > 0, intr.fy * cam[:, 1] / z + intr.cy, -1.0)
    return np.rint(u).astype(int), np.rint(v).astype(int), z


def in_frustum(intr: CameraIntrinsics, pose: Pose, points) -> np.ndarray:
    iu, iv, z = project(intr, pose, points)
    return (z > 0) & (iu >= 0) & (iu < intr.width) & (iv >= 0) & (iv < intr.height)


def forward_axis(yaw: float) -> np.ndarray:
    return np.array([math.cos(yaw), math.sin(yaw), 0.0])


def keyframe_update(current: CloudFrame, keyframes: list[CloudFrame], state: QuadState,
                    config: PerceptionConfig) -> list[CloudFrame]:
    """Promote, prune and retire keyframes for a new cloud frame.

    The difference metric is the fraction of current points farther than
    ``tau_diff`` from the latest keyframe. Keyframes whose points all lie
    behind the vehicle (along its yaw-forward axis) are dropped.
    """
    kfs = list(keyframes)
    if not kfs:
        promote = True
    else:
        latest = kfs[-1]
        n = len(current.points)
        if n == 0:
            metric = 0.0
        elif latest.tree.size == 0:
            metric = 1.0
        else:
            dist, _ = latest.tree.query(current.points, 1)
            metric = float(np.mean(dist[:, 0] > config.tau_diff))
        promote = metric > config.rho_new
    if promote:
        if kfs:
            prev = kfs[-1]
            near = current.tree.within(prev.points, config.tau_prune) if len(prev.points) else np.zeros(0, bool)
            kfs[-1] = replace(prev, points=prev.points[~near], tree=None) if near.any() else prev
        kfs.append(replace(current, is_keyframe=True))
    fwd = forward_axis(state.phi)
    p = np.asarray(state.p, dtype=float)
    kept = []
    for kf in kfs:
        if np.all((kf.points - p) @ fwd < 0):
            continue
        kept.append(kf)
    return kept


class KeyframeManager:
    """Mutable holder for the keyframe list across frames."""

    def __init__(self, config: PerceptionConfig | None = None):
        self.config = config or PerceptionConfig()
        self.keyframes: list[CloudFrame] = []

    def update(self, current: CloudFrame, state: QuadState) -> list[CloudFrame]:
        self.keyframes = keyframe_update(current, self.keyframes, state, self.config)
        return self.keyframes

    def reset(self):
        self.keyframes = []


def _forward_speed(state: QuadState) -> float:
    return float(np.asarray(state.v) @ forward_axis(state.phi))


def build_dual_trees(frame: DepthImage, state: QuadState, config: PerceptionConfig,
                     keyframes: KeyframeManager | None = None) -> DualTrees:
    """Obstacle tree, edge tree and keyframe set for one depth frame.

    The dilation kernel uses ``v_f = max(forward speed, config.min_forward_speed)``.
    """
    if (frame.intrinsics.width, frame.intrinsics.height) != (config.width, config.height):
        raise InvalidInputError("frame must be downsampled to the configured resolution")
    points = deproject(frame)
    current = CloudFrame(points=points, pose=frame.pose, timestamp=frame.timestamp)
    v_f = max(_forward_speed(state), config.min_forward_speed)
    kernel = inflation_radius(config.safety_distance, v_f, config.dt, frame.intrinsics.fx)
    dilated = dilate(frame, kernel)
    edges = deproject(dilated, edge_filter(dilated, config.edge_threshold))
    kf_trees = ()
    if keyframes is not None and config.multi_frame:
        kfs = keyframes.update(current, state)
        kf_trees = tuple((kf.tree, kf.pose) for kf in kfs if kf.tree is not current.tree)
    return DualTrees(obstacle_current=current.tree, keyframes=kf_trees, edge=KdTree(edges),
                     frame=frame, dilated=dilated, kernel=kernel)


def query_obstacles_batch(trees: DualTrees, points, m: int, fov_check: bool = True):
    """M nearest obstacle points for each query.

    Returns ``(obstacles, dist)`` of shapes ``(n, m, 3)`` and ``(n, m)``;
    missing neighbours are padded with ``nan`` points and ``inf`` distance.
    Queries inside the current frustum use the current frame only; the rest
    merge the current frame with every keyframe.
    """
    if m < 1:
        raise InvalidInputError(f"m must be >= 1, got {m}")
    q = np.asarray(points, dtype=float).reshape(-1, 3)
    n = len(q)
    obs = np.full((n, m, 3), np.nan)
    dist = np.full((n, m), np.inf)
    sources = [trees.obstacle_current] + [t for t, _ in trees.keyframes]
    if fov_check:
        inside = in_frustum(trees.intrinsics, trees.pose, q)
    else:
        inside = np.zeros(n, dtype=bool)
    if not trees.keyframes:
        inside[:] = True

    cur = trees.obstacle_current
    if inside.any() and cur.size:
        d, i = cur.query(q[inside], m)
        k = d.shape[1]
        obs[inside, :k] = cur.points[i]
        dist[inside, :k] = d
    outside = ~inside
    if outside.any():
        qo = q[outside]
        cand_d, cand_p = [], []
        for tree in sources:
            if tree.size == 0:
                continue
            d, i = tree.query(qo, m)
            cand_d.append(d)
            cand_p.append(tree.points[i])
        if cand_d:
            # stable sort keeps (tree order, per-tree rank) among equal distances
            all_d = np.concatenate(cand_d, axis=1)
            all_p = np.concatenate(cand_p, axis=1)
            order = np.argsort(all_d, axis=1, kind="stable")[:, :m]
            k = order.shape[1]
            obs[outside, :k] = np.take_along_axis(all_p, order[:, :, None], axis=1)
            dist[outside, :k] = np.take_along_axis(all_d, order, axis=1)
    return obs, dist


def query_obstacles(trees: DualTrees, p, m: int, fov_check: bool = True) -> list[tuple[np.ndarray, float]]:
    obs, dist = query_obstacles_batch(trees, p, m, fov_check)
    return [(obs[0, j], float(dist[0, j])) for j in range(m) if np.isfinite(dist[0, j])]


def colliding_waypoints(waypoints: WaypointSequence, dilated: DepthImage) -> np.ndarray:
    """Waypoints that project into the image at or behind the dilated surface."""
    intr = dilated.intrinsics
    iu, iv, z = project(intr, dilated.pose, waypoints.positions)
    inside = (z > 0) & (iu >= 0) & (iu < intr.width) & (iv >= 0) & (iv < intr.height)
    hit = np.zeros(len(waypoints), dtype=bool)
    d = np.where(dilated.valid, dilated.depths, NO_RETURN)
    hit[inside] = z[inside] >= d[iv[inside], iu[inside]]
    return hit


def coarse_adjust(waypoints: WaypointSequence, trees: DualTrees,
                  dilated: DepthImage | None = None) -> WaypointSequence:
    """Move colliding waypoints onto their nearest edge point.

    Only positions change. A colliding waypoint with no edge point available is
    left in place and marked in ``unresolved``.
    """
    dilated = trees.dilated if dilated is None else dilated
    hit = colliding_waypoints(waypoints, dilated)
    if not hit.any():
        return waypoints
    positions = waypoints.positions.copy()
    unresolved = waypoints.unresolved.copy()
    if trees.edge.size == 0:
        unresolved |= hit
        return waypoints.with_positions(positions, unresolved=unresolved)
    _, idx = trees.edge.query(positions[hit], 1)
    positions[hit] = trees.edge.points[idx[:, 0]]
    return waypoints.with_positions(positions, adjusted=waypoints.adjusted | hit,
                                    unresolved=unresolved)


def write_depth_dump(image: DepthImage, path) -> None:
    """Text dump: ``width height fx fy cx cy`` then row-major depths, -1 = no return."""
    intr = image.intrinsics
    d = np.where(image.valid, image.depths, -1.0)
    lines = [f"{intr.width} {intr.height} {intr.fx!r} {intr.fy!r} {intr.cx!r} {intr.cy!r}"]
    lines += [" ".join(repr(float(x)) for x in row) for row in d]
    Path(path).write_text("\n".join(lines) + "\n")


def read_depth_dump(path, max_range: float = 10.0) -> DepthImage:
    tokens = Path(path).read_text().split()
    if len(tokens) < 6:
        raise InvalidInputError(f"{path}: truncated depth dump header")
    w, h = int(tokens[0]), int(tokens[1])
    fx, fy, cx, cy = (float(t) for t in tokens[2:6])
    vals = np.array([float(t) for t in tokens[6:]])
    if vals.size != w * h:
        raise InvalidInputError(f"{path}: expected {w * h} depths, found {vals.size}")
    d = vals.reshape(h, w)
    d = np.where(d < 0, NO_RETURN, d)
    return DepthImage(CameraIntrinsics(fx, fy, cx, cy, w, h), d, max_range=max_range)
