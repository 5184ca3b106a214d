"""Synthetic multi-agent LiDAR scenes.

A scene is a set of agent poses (index 0 is the ego vehicle), one point
cloud per agent in that agent's local sensor frame, and ground-truth boxes
in the ego frame. Clouds come from a simple spinning-LiDAR model: a fixed
azimuth grid, a fan of elevation beams, nearest-hit occlusion against the
object boxes, and ground returns where a descending beam reaches the plane
inside the sensor's range.

Everything is a pure function of (config, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .geometry import BoxBEV, PoseSE2, relative_pose, wrap_angle
from .rng import derive_rng

SURFACE_GROUND = 0
SURFACE_OBJECT = 1
SURFACE_CLUTTER = 2

DEFAULT_EXTENT = (-32.0, 32.0, -32.0, 32.0)


@dataclass
class SceneConfig:
    extent: tuple = DEFAULT_EXTENT  # x_min, x_max, y_min, y_max (meters, ego frame)
    num_agents: int = 3
    num_objects: int = 8
    num_beams: int = 16
    points_per_beam: int = 120  # azimuth samples per beam revolution
    max_range: float = 50.0
    sensor_height: float = 1.7
    elevation_low_deg: float = -14.0
    elevation_high_deg: float = 2.0
    large_object_fraction: float = 0.25
    min_center_gap: float = 5.0
    agent_radius: tuple = (8.0, 19.0)

    def validate(self) -> None:
        if self.num_agents < 1:
            raise InvalidArgumentError("scene needs at least one agent")
        if self.num_objects < 0 or self.num_beams < 1 or self.points_per_beam < 1:
            raise InvalidArgumentError("objects/beams/points_per_beam must be positive")
        x0, x1, y0, y1 = self.extent
        if not (x1 > x0 and y1 > y0):
            raise InvalidArgumentError(f"degenerate extent {self.extent}")


@dataclass
class PointCloud:
    """Columnar point storage in the owning sensor's local frame."""

    xyz: np.ndarray  # (n, 3) float64
    intensity: np.ndarray  # (n,) float64 in [0, 1]
    beam_id: np.ndarray  # (n,) int32
    range_m: np.ndarray  # (n,) float64, distance from the sensor origin
    surface: np.ndarray  # (n,) uint8
    num_beams: int
    sensor_height: float

    def __len__(self) -> int:
        return self.xyz.shape[0]

    def take(self, sel) -> "PointCloud":
        return PointCloud(
            self.xyz[sel].copy(),
            self.intensity[sel].copy(),
            self.beam_id[sel].copy(),
            self.range_m[sel].copy(),
            self.surface[sel].copy(),
            self.num_beams,
            self.sensor_height,
        )

    def copy(self) -> "PointCloud":
        return self.take(slice(None))

    @staticmethod
    def empty(num_beams: int, sensor_height: float) -> "PointCloud":
        return PointCloud(
            np.zeros((0, 3)),
            np.zeros(0),
            np.zeros(0, dtype=np.int32),
            np.zeros(0),
            np.zeros(0, dtype=np.uint8),
            num_beams,
            sensor_height,
        )

    @staticmethod
    def merge(clouds: list["PointCloud"]) -> "PointCloud":
        if not clouds:
            raise InvalidArgumentError("merge of zero clouds")
        nb = clouds[0].num_beams
        sh = clouds[0].sensor_height
        return PointCloud(
            np.concatenate([c.xyz for c in clouds]),
            np.concatenate([c.intensity for c in clouds]),
            np.concatenate([c.beam_id for c in clouds]),
            np.concatenate([c.range_m for c in clouds]),
            np.concatenate([c.surface for c in clouds]),
            nb,
            sh,
        )


@dataclass
class Scene:
    agents: list  # [(PoseSE2, PointCloud)], index 0 = ego
    gt_boxes: list  # [BoxBEV] in the ego frame
    seed: int
    config: SceneConfig = field(default_factory=SceneConfig)


def _ray_box_distance(origin: np.ndarray, dirs: np.ndarray, box: BoxBEV) -> np.ndarray:
    """2D slab test: horizontal distance along each ray to an oriented box
    (inf where the ray misses or starts inside)."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, s], [-s, c]])  # world -> box frame
    o = rot @ (origin - np.array([box.cx, box.cy]))
    d = dirs @ rot.T
    half = np.array([0.5 * box.l, 0.5 * box.w])
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    lo = np.minimum(t1, t2)
    hi = np.maximum(t1, t2)
    # rays parallel to a slab axis: inside -> (-inf, inf), outside -> miss
    par = np.abs(d) < 1e-12
    inside = np.abs(o) <= half
    lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(par, np.where(inside, np.inf, -np.inf), hi)
    tmin = lo.max(axis=1)
    tmax = hi.min(axis=1)
    dist = np.where((tmax >= tmin) & (tmin > 1e-9), tmin, np.inf)
    return dist


def simulate_cloud(
    pose: PoseSE2,
    boxes: list[BoxBEV],
    heights: list[float],
    config: SceneConfig,
    seed: int,
    agent_index: int,
) -> tuple[PointCloud, np.ndarray]:
    """Ray-cast one agent's cloud. Returns the cloud (local frame) and, per
    point, the index of the object that produced it (-1 for ground)."""
    rng = derive_rng(seed, "cloud", agent_index)
    n_az = config.points_per_beam
    jitter = rng.random()
    az_local = 2.0 * math.pi * (np.arange(n_az) + jitter) / n_az
    az_world = az_local + pose.yaw
    dirs = np.stack([np.cos(az_world), np.sin(az_world)], axis=1)
    origin = np.array([pose.x, pose.y])
    h = config.sensor_height

    if boxes:
        dist = np.stack([_ray_box_distance(origin, dirs, b) for b in boxes])  # (n_box, n_az)
        hts = np.asarray(heights)[:, None]
    else:
        dist = np.zeros((0, n_az))
        hts = np.zeros((0, 1))

    elevs = np.deg2rad(
        np.linspace(config.elevation_low_deg, config.elevation_high_deg, config.num_beams)
    )
    u_int = rng.random((config.num_beams, n_az))

    pts, inten, beams, rng_m, surf, owner = [], [], [], [], [], []
    for k, e in enumerate(elevs):
        tan_e = math.tan(e)
        if len(boxes):
            z_at = h + dist * tan_e
            ok = (z_at >= 0.0) & (z_at <= hts) & np.isfinite(dist)
            d_obj = np.where(ok, dist, np.inf)
            obj_idx = d_obj.argmin(axis=0)
            d_best = d_obj[obj_idx, np.arange(n_az)]
        else:
            obj_idx = np.zeros(n_az, dtype=int)
            d_best = np.full(n_az, np.inf)
        d_ground = h / -tan_e if tan_e < 0.0 else np.inf
        hit_obj = d_best < d_ground
        slant = 1.0 / math.cos(e)

        d_hit = np.where(hit_obj, d_best, d_ground)
        valid = np.isfinite(d_hit) & (d_hit * slant <= config.max_range)
        if not valid.any():
            continue
        d = d_hit[valid]
        az_v = az_local[valid]
        z = h + d * tan_e
        pts.append(np.stack([d * np.cos(az_v), d * np.sin(az_v), z], axis=1))
        u = u_int[k, valid]
        obj_mask = hit_obj[valid]
        inten.append(np.where(obj_mask, 0.55 + 0.4 * u, 0.08 + 0.22 * u))
        beams.append(np.full(d.shape, k, dtype=np.int32))
        rng_m.append(d * slant)
        surf.append(np.where(obj_mask, SURFACE_OBJECT, SURFACE_GROUND).astype(np.uint8))
        owner.append(np.where(obj_mask, obj_idx[valid], -1))

    if not pts:
        return PointCloud.empty(config.num_beams, h), np.zeros(0, dtype=int)
    cloud = PointCloud(
        np.concatenate(pts),
        np.concatenate(inten),
        np.concatenate(beams),
        np.concatenate(rng_m),
        np.concatenate(surf),
        config.num_beams,
        h,
    )
    return cloud, np.concatenate(owner)


def _sample_boxes(config: SceneConfig, rng: np.random.Generator) -> tuple[list[BoxBEV], list[float]]:
    x0, x1, y0, y1 = config.extent
    mx = 0.12 * (x1 - x0)
    my = 0.12 * (y1 - y0)
    boxes: list[BoxBEV] = []
    heights: list[float] = []
    tries = 0
    while len(boxes) < config.num_objects and tries < 200 * (config.num_objects + 1):
        tries += 1
        cx = rng.uniform(x0 + mx, x1 - mx)
        cy = rng.uniform(y0 + my, y1 - my)
        if any((cx - b.cx) ** 2 + (cy - b.cy) ** 2 < config.min_center_gap**2 for b in boxes):
            continue
        if cx * cx + cy * cy < 3.0**2:  # keep the ego position clear
            continue
        large = rng.random() < config.large_object_fraction
        if large:
            w, l, ht = rng.uniform(2.3, 2.6), rng.uniform(5.5, 7.0), 2.6
        else:
            w, l, ht = rng.uniform(1.7, 2.1), rng.uniform(3.8, 4.7), 1.6
        boxes.append(BoxBEV(cx, cy, w, l, wrap_angle(rng.uniform(-math.pi, math.pi)), 1.0))
        heights.append(ht)
    return boxes, heights


def generate_scene(config: SceneConfig, seed: int) -> Scene:
    """Deterministically build one collaborative frame."""
    config.validate()
    rng = derive_rng(seed, "scene")
    boxes, heights = _sample_boxes(config, rng)

    poses = [PoseSE2(0.0, 0.0, 0.0)]
    r_lo, r_hi = config.agent_radius
    for i in range(1, config.num_agents):
        radius = rng.uniform(r_lo, r_hi)
        ang = rng.uniform(0.0, 2.0 * math.pi)
        poses.append(
            PoseSE2(radius * math.cos(ang), radius * math.sin(ang), wrap_angle(rng.uniform(-math.pi, math.pi)))
        )

    clouds = []
    owners = []
    for i, pose in enumerate(poses):
        cloud, owner = simulate_cloud(pose, boxes, heights, config, seed, i)
        clouds.append(cloud)
        owners.append(owner)

    # guarantee evidence: every object must produce at least one return somewhere
    seen = np.zeros(len(boxes), dtype=bool)
    for owner in owners:
        for oi in owner[owner >= 0]:
            seen[oi] = True
    for oi in np.nonzero(~seen)[0]:
        b = boxes[oi]
        dists = [math.hypot(b.cx - p.x, b.cy - p.y) for p in poses]
        ai = int(np.argmin(dists))
        pose = poses[ai]
        rel = relative_pose(PoseSE2(b.cx, b.cy, 0.0), pose)
        d = math.hypot(rel.x, rel.y)
        z = heights[oi] * 0.5
        c = clouds[ai]
        extra = PointCloud(
            np.array([[rel.x, rel.y, z]]),
            np.array([0.7]),
            np.array([config.num_beams // 2], dtype=np.int32),
            np.array([math.hypot(d, z - config.sensor_height)]),
            np.array([SURFACE_OBJECT], dtype=np.uint8),
            config.num_beams,
            config.sensor_height,
        )
        clouds[ai] = PointCloud.merge([c, extra])

    return Scene(list(zip(poses, clouds)), boxes, seed, config)


def transform_to_ego(cloud: PointCloud, src: PoseSE2, ego: PoseSE2) -> PointCloud:
    """Rigidly re-express a cloud from src's frame in ego's frame. z and all
    per-point metadata (including the recorded sensor range) are preserved."""
    rel = relative_pose(src, ego)
    out = cloud.copy()
    out.xyz[:, :2] = rel.apply(cloud.xyz[:, :2])
    return out


def inject_pose_noise(pose: PoseSE2, sigma_loc: float, sigma_head: float, seed: int) -> PoseSE2:
    """Perturb a pose estimate with independent Gaussian localization and
    heading noise; deterministic per seed."""
    if sigma_loc < 0 or sigma_head < 0:
        raise InvalidArgumentError(f"negative noise sigma: ({sigma_loc}, {sigma_head})")
    rng = derive_rng(seed, "pose_noise")
    dx, dy = rng.normal(0.0, sigma_loc, size=2) if sigma_loc > 0 else (0.0, 0.0)
    dyaw = rng.normal(0.0, sigma_head) if sigma_head > 0 else 0.0
    return PoseSE2(pose.x + dx, pose.y + dy, wrap_angle(pose.yaw + dyaw))
