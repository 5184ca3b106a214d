"""Seven point-cloud corruption operators.

Each operator is a pure, seeded function from cloud to cloud with a single
scalar severity in [0, 1]. The models are deliberately simple analogues of
physically motivated degradations: the constants are calibrated so that
severity 1.0 visibly wrecks single-agent detection at this scale.

Semantics per kind (n = point count, B = beam count):
  beam_missing  drop every point of floor(severity * B) randomly chosen beams
  motion_blur   jitter xyz with N(0, (severity * 0.3 m)^2)
  fog           keep each point with prob exp(-beta * range),
                beta = severity * 0.05 / m, then add floor(severity * 0.02 * n)
                clutter points within 10 m of the sensor
  cross_talk    replace a severity * 0.1 fraction of points with uniform
                random points inside the BEV extent
  cross_sensor  keep only beams with beam_id % k == 0, k = 1 + floor(severity * 3)
  water         drop each ground point with prob severity * 0.8
  echo          drop each object point with prob severity * 0.5 * (1 - intensity)
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidArgumentError
from .rng import derive_rng
from .scene import (
    DEFAULT_EXTENT,
    SURFACE_CLUTTER,
    SURFACE_GROUND,
    SURFACE_OBJECT,
    PointCloud,
)

CORRUPTION_KINDS = (
    "beam_missing",
    "motion_blur",
    "fog",
    "cross_talk",
    "cross_sensor",
    "water",
    "echo",
)

MOTION_BLUR_SIGMA_MAX = 0.3  # meters at severity 1
FOG_BETA_MAX = 0.05  # extinction per meter at severity 1
FOG_CLUTTER_FRACTION = 0.02
FOG_CLUTTER_RANGE = 10.0
CROSS_TALK_FRACTION = 0.1
WATER_DROP_MAX = 0.8
ECHO_DROP_MAX = 0.5


def apply_corruption(
    cloud: PointCloud,
    kind: str,
    severity: float,
    seed: int,
    extent: tuple = DEFAULT_EXTENT,
) -> PointCloud:
    """Apply one corruption operator; deterministic in (cloud, kind, severity, seed)."""
    if not 0.0 <= severity <= 1.0:
        raise InvalidArgumentError(f"severity {severity} outside [0, 1]")
    if kind not in CORRUPTION_KINDS:
        raise InvalidArgumentError(f"unknown corruption kind {kind!r}; expected one of {CORRUPTION_KINDS}")
    rng = derive_rng(seed, "corruption", kind)
    n = len(cloud)

    if kind == "beam_missing":
        n_drop = int(severity * cloud.num_beams)
        dropped = rng.choice(cloud.num_beams, size=n_drop, replace=False)
        return cloud.take(~np.isin(cloud.beam_id, dropped))

    if kind == "motion_blur":
        out = cloud.copy()
        out.xyz += rng.normal(0.0, severity * MOTION_BLUR_SIGMA_MAX, size=(n, 3))
        return out

    if kind == "fog":
        beta = severity * FOG_BETA_MAX
        keep = rng.random(n) < np.exp(-beta * cloud.range_m)
        out = cloud.take(keep)
        n_clutter = int(severity * FOG_CLUTTER_FRACTION * n)
        if n_clutter:
            r = rng.uniform(0.0, FOG_CLUTTER_RANGE, n_clutter)
            az = rng.uniform(0.0, 2.0 * np.pi, n_clutter)
            el = rng.uniform(-0.1, 0.1, n_clutter)
            d = r * np.cos(el)
            xyz = np.stack(
                [d * np.cos(az), d * np.sin(az), cloud.sensor_height + r * np.sin(el)], axis=1
            )
            clutter = PointCloud(
                xyz,
                rng.uniform(0.0, 1.0, n_clutter),
                rng.integers(0, cloud.num_beams, n_clutter, dtype=np.int32),
                r,
                np.full(n_clutter, SURFACE_CLUTTER, dtype=np.uint8),
                cloud.num_beams,
                cloud.sensor_height,
            )
            out = PointCloud.merge([out, clutter])
        return out

    if kind == "cross_talk":
        out = cloud.copy()
        n_rep = int(severity * CROSS_TALK_FRACTION * n)
        if n_rep:
            idx = rng.choice(n, size=n_rep, replace=False)
            x0, x1, y0, y1 = extent
            out.xyz[idx, 0] = rng.uniform(x0, x1, n_rep)
            out.xyz[idx, 1] = rng.uniform(y0, y1, n_rep)
            out.xyz[idx, 2] = rng.uniform(0.0, 2.0, n_rep)
            out.intensity[idx] = rng.uniform(0.0, 1.0, n_rep)
            out.beam_id[idx] = rng.integers(0, cloud.num_beams, n_rep, dtype=np.int32)
            delta = out.xyz[idx] - np.array([0.0, 0.0, cloud.sensor_height])
            out.range_m[idx] = np.linalg.norm(delta, axis=1)
            out.surface[idx] = SURFACE_CLUTTER
        return out

    if kind == "cross_sensor":
        k = 1 + int(severity * 3)
        return cloud.take(cloud.beam_id % k == 0)

    if kind == "water":
        u = rng.random(n)
        drop = (cloud.surface == SURFACE_GROUND) & (u < severity * WATER_DROP_MAX)
        return cloud.take(~drop)

    # echo
    u = rng.random(n)
    drop = (cloud.surface == SURFACE_OBJECT) & (u < severity * ECHO_DROP_MAX * (1.0 - cloud.intensity))
    return cloud.take(~drop)
