"""Synthetic multi-channel lidar scans of simple primitive scenes.

Scene files are YAML::

    noise_sigma: 0.02          # range noise std, meters
    seed: 7
    rays:
      channels: 16
      elevation_min_deg: -15
      elevation_max_deg: 15
      azimuth_step_deg: 0.2
      max_range: 60
    primitives:
      - {type: box, center: [0, 0, 2], extent: [12, 10, 4], rpy_deg: [0, 0, 0]}
      - {type: cylinder, center: [3, 2, 0], radius: 0.4, height: 2}   # center is the base
      - {type: plane, center: [0, 0, 0], extent: [20, 20]}   # normal is local +z
    path:
      - {t: 0.0, xyz: [0, 0, 1.2], rpy_deg: [0, 0, 0]}

Poses in the path map sensor to world (right-handed, z-up). A box seen
from inside returns its inner faces, which is how rooms are modeled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import yaml

from gpslam.geometry import Pose, matrix_to_quat


def _rpy_matrix(rpy_deg) -> np.ndarray:
    r, p, y = np.radians(np.asarray(rpy_deg, dtype=float))
    cr, sr, cp, sp, cy, sy = np.cos(r), np.sin(r), np.cos(p), np.sin(p), np.cos(y), np.sin(y)
    Rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    Ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    Rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def pose_from_rpy(xyz, rpy_deg=(0.0, 0.0, 0.0)) -> Pose:
    return Pose(matrix_to_quat(_rpy_matrix(rpy_deg)), xyz)


@dataclass
class Primitive:
    kind: str
    pose: Pose
    extent: tuple = ()
    radius: float = 0.0
    height: float = 0.0

    def __post_init__(self):
        if self.kind not in ("plane", "box", "cylinder"):
            raise ValueError(f"unknown primitive {self.kind!r}")
        if self.kind == "plane" and len(self.extent) != 2:
            raise ValueError("a plane needs a 2-value extent")
        if self.kind == "box" and len(self.extent) != 3:
            raise ValueError("a box needs a 3-value extent")
        if self.kind == "cylinder" and (self.radius <= 0 or self.height <= 0):
            raise ValueError("a cylinder needs positive radius and height")

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Smallest positive hit distance per ray, ``inf`` when missed."""
        inv = self.pose.inverse()
        o = inv.apply(origins)
        d = dirs @ inv.rotation.T
        if self.kind == "plane":
            return _hit_rectangle(o, d, self.extent)
        if self.kind == "box":
            return _hit_box(o, d, np.asarray(self.extent, dtype=float) / 2)
        return _hit_cylinder(o, d, self.radius, self.height)


def _hit_rectangle(o, d, extent):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -o[:, 2] / d[:, 2]
    t = np.where(np.isfinite(t) & (t > 1e-9), t, np.inf)
    if extent:
        hx, hy = np.asarray(extent, dtype=float) / 2
        p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
        t = np.where((np.abs(p[:, 0]) <= hx) & (np.abs(p[:, 1]) <= hy), t, np.inf)
    return t


def _hit_box(o, d, half):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    t1 = np.nan_to_num(t1, nan=-np.inf)
    t2 = np.nan_to_num(t2, nan=np.inf)
    t_near = np.max(np.minimum(t1, t2), axis=1)
    t_far = np.min(np.maximum(t1, t2), axis=1)
    hit = (t_far >= t_near) & (t_far > 1e-9)
    return np.where(hit, np.where(t_near > 1e-9, t_near, t_far), np.inf)


def _hit_cylinder(o, d, radius, height):
    # vertical axis along local z, base at z=0
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2 * (o[:, 0] * d[:, 0] + o[:, 1] * d[:, 1])
    c = o[:, 0] ** 2 + o[:, 1] ** 2 - radius**2
    disc = b * b - 4 * a * c
    best = np.full(len(o), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        sq = np.sqrt(np.maximum(disc, 0.0))
        for t in ((-b - sq) / (2 * a), (-b + sq) / (2 * a)):
            z = o[:, 2] + t * d[:, 2]
            ok = (disc >= 0) & (a > 1e-15) & (t > 1e-9) & (z >= 0) & (z <= height)
            best = np.where(ok & (t < best), t, best)
        for zc in (0.0, height):
            t = (zc - o[:, 2]) / d[:, 2]
            p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
            ok = np.isfinite(t) & (t > 1e-9) & (p[:, 0] ** 2 + p[:, 1] ** 2 <= radius**2)
            best = np.where(ok & (t < best), t, best)
    return best


@dataclass
class RayPattern:
    channels: int = 16
    elevation_min_deg: float = -15.0
    elevation_max_deg: float = 15.0
    azimuth_step_deg: float = 0.2
    max_range: float = 60.0

    def directions(self) -> np.ndarray:
        el = np.radians(np.linspace(self.elevation_min_deg, self.elevation_max_deg, self.channels))
        az = np.radians(np.arange(0.0, 360.0, self.azimuth_step_deg))
        E, A = np.meshgrid(el, az, indexing="ij")
        return np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1).reshape(-1, 3)


@dataclass
class SceneSpec:
    primitives: list
    path: list
    timestamps: list
    rays: RayPattern = field(default_factory=RayPattern)
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if len(self.path) != len(self.timestamps):
            raise ValueError("path and timestamps differ in length")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("path timestamps must increase")

    def __len__(self):
        return len(self.path)


def _primitive_from_dict(item: dict) -> Primitive:
    kind = item["type"]
    pose = pose_from_rpy(item.get("center", [0, 0, 0]), item.get("rpy_deg", [0, 0, 0]))
    return Primitive(
        kind,
        pose,
        tuple(item.get("extent", ())),
        float(item.get("radius", 0.0)),
        float(item.get("height", 0.0)),
    )


def scene_from_dict(data: dict) -> SceneSpec:
    prims = [_primitive_from_dict(p) for p in data.get("primitives", [])]
    path, stamps = [], []
    for k, item in enumerate(data.get("path", [])):
        path.append(pose_from_rpy(item.get("xyz", [0, 0, 0]), item.get("rpy_deg", [0, 0, 0])))
        stamps.append(float(item.get("t", k * 0.1)))
    rays = RayPattern(**data.get("rays", {}))
    return SceneSpec(prims, path, stamps, rays, float(data.get("noise_sigma", 0.02)), int(data.get("seed", 0)))


def load_scene(path) -> SceneSpec:
    with open(path) as fh:
        return scene_from_dict(yaml.safe_load(fh))


def synth_scan(scene: SceneSpec, pose_index: int) -> np.ndarray:
    """First-hit ray cast from path pose ``pose_index``; points in the sensor frame."""
    pose = scene.path[pose_index]
    dirs_s = scene.rays.directions()
    dirs_w = dirs_s @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, dirs_w.shape)
    t = np.full(len(dirs_w), np.inf)
    for prim in scene.primitives:
        t = np.minimum(t, prim.intersect(origins, dirs_w))
    hit = t <= scene.rays.max_range
    rng = np.random.default_rng([scene.seed, pose_index])
    noise = rng.normal(0.0, scene.noise_sigma, size=len(t)) if scene.noise_sigma > 0 else np.zeros(len(t))
    ranges = t[hit] + noise[hit]
    return dirs_s[hit] * ranges[:, None]


def box_room(
    size=(12.0, 10.0, 4.0),
    clutter: bool = True,
) -> list:
    """A room (inner faces of a box, floor at z=0) with a few asymmetric obstacles."""
    sx, sy, sz = size
    prims = [Primitive("box", Pose(translation=[0.0, 0.0, sz / 2]), (sx, sy, sz))]
    if clutter:
        prims += [
            Primitive("box", pose_from_rpy([3.0, 2.5, 0.75], [0, 0, 20]), (1.2, 0.8, 1.5)),
            Primitive("box", pose_from_rpy([-3.5, -2.0, 0.5], [0, 0, 0]), (0.8, 1.6, 1.0)),
            Primitive("cylinder", Pose(translation=[-2.5, 2.5, 0.0]), radius=0.35, height=3.0),
            Primitive("cylinder", Pose(translation=[2.0, -3.0, 0.0]), radius=0.5, height=2.0),
        ]
    return prims


def square_loop_path(n_frames: int = 50, side: float = 4.0, height: float = 1.2, dt: float = 0.1, turns: float = 1.0):
    """Poses along a closed square centered at the origin, starting at a corner.

    Yaw advances linearly through ``turns`` full revolutions; height
    oscillates by a few centimeters.
    """
    s = np.arange(n_frames) / n_frames * 4.0
    h = side / 2
    corners = np.array([[-h, -h], [h, -h], [h, h], [-h, h], [-h, -h]])
    seg = np.minimum(s.astype(int), 3)
    frac = s - seg
    xy = corners[seg] + frac[:, None] * (corners[seg + 1] - corners[seg])
    yaw = 360.0 * turns * np.arange(n_frames) / n_frames
    z = height + 0.05 * np.sin(2 * np.pi * np.arange(n_frames) / n_frames)
    path = [pose_from_rpy([x, y, zz], [0, 0, w]) for (x, y), zz, w in zip(xy, z, yaw)]
    stamps = [k * dt for k in range(n_frames)]
    return path, stamps


def room_loop_scene(n_frames: int = 50, noise_sigma: float = 0.02, seed: int = 0, **kw) -> SceneSpec:
    path, stamps = square_loop_path(n_frames, **kw)
    return SceneSpec(box_room(), path, stamps, RayPattern(), noise_sigma, seed)
