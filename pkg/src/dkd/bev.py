"""Point cloud -> BEV feature map: simplified pillar encoder plus a small
stride-1 convolutional backbone shared by the teacher and the student."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .params import ParamSet, conv_init, linear_init
from .scene import PointCloud
from .tensor import (
    Tensor,
    add,
    conv_gn_act,
    matmul,
    relu,
    scatter_to_grid,
    segment_max,
)

POINT_FEATURE_DIM = 9  # x, y, z, intensity, offsets to pillar centroid (3) and cell center (2)


@dataclass(frozen=True)
class BEVGridConfig:
    x_range: tuple = (-32.0, 32.0)
    y_range: tuple = (-32.0, 32.0)
    h: int = 64
    w: int = 64
    c: int = 16
    max_points_per_pillar: int = 32

    def __post_init__(self):
        if self.h < 1 or self.w < 1 or self.c < 1:
            raise InvalidArgumentError(f"grid dims must be positive: {self.h}x{self.w}x{self.c}")
        if self.x_range[1] <= self.x_range[0] or self.y_range[1] <= self.y_range[0]:
            raise InvalidArgumentError(f"bad grid ranges {self.x_range}/{self.y_range}")
        if self.max_points_per_pillar < 1:
            raise InvalidArgumentError("max_points_per_pillar must be >= 1")

    @property
    def cell_w(self) -> float:
        return (self.x_range[1] - self.x_range[0]) / self.w

    @property
    def cell_h(self) -> float:
        return (self.y_range[1] - self.y_range[0]) / self.h


@dataclass
class BEVFeature:
    tensor: Tensor  # c x h x w
    grid: BEVGridConfig
    num_dropped: int = 0

    @property
    def shape(self):
        return self.tensor.shape


def norm_groups(c: int) -> int:
    """Group-norm group count: the largest divisor of c that is at most 8
    while keeping at least two channels per group."""
    for g in range(min(8, c // 2), 0, -1):
        if c % g == 0:
            return g
    return 1


def init_pillar_params(ps: ParamSet, rng: np.random.Generator, c: int, prefix: str = "pillar") -> None:
    ps.add(f"{prefix}.weight", linear_init(rng, POINT_FEATURE_DIM, c))
    ps.add(f"{prefix}.bias", np.zeros(c))


def init_backbone_params(ps: ParamSet, rng: np.random.Generator, c: int, prefix: str = "backbone") -> None:
    for i in (1, 2):
        ps.add(f"{prefix}.conv{i}.weight", conv_init(rng, c, c, 3, 3))
        ps.add(f"{prefix}.conv{i}.bias", np.zeros(c))
        ps.add(f"{prefix}.gn{i}.scale", np.ones(c))
        ps.add(f"{prefix}.gn{i}.shift", np.zeros(c))


def pillarize(cloud: PointCloud, grid: BEVGridConfig, params: ParamSet, prefix: str = "pillar") -> BEVFeature:
    """Bucket points into pillars, embed each point, max-pool per pillar and
    scatter onto the grid. Points outside the extent are dropped (counted);
    pillars past max_points_per_pillar are truncated in insertion order."""
    n = len(cloud)
    if n == 0:
        return BEVFeature(Tensor(np.zeros((grid.c, grid.h, grid.w))), grid, 0)

    x = cloud.xyz[:, 0]
    y = cloud.xyz[:, 1]
    ix = np.floor((x - grid.x_range[0]) / grid.cell_w).astype(np.int64)
    iy = np.floor((y - grid.y_range[0]) / grid.cell_h).astype(np.int64)
    inside = (ix >= 0) & (ix < grid.w) & (iy >= 0) & (iy < grid.h)
    dropped = int(n - inside.sum())
    if not inside.any():
        return BEVFeature(Tensor(np.zeros((grid.c, grid.h, grid.w))), grid, dropped)

    idx = np.nonzero(inside)[0]
    cells = iy[idx] * grid.w + ix[idx]
    order = np.argsort(cells, kind="stable")  # stable: preserves insertion order per pillar
    idx = idx[order]
    cells = cells[order]

    uniq, starts_first, counts = np.unique(cells, return_index=True, return_counts=True)
    rank = np.arange(len(cells)) - np.repeat(starts_first, counts)
    keep = rank < grid.max_points_per_pillar
    idx, cells = idx[keep], cells[keep]
    uniq, counts = np.unique(cells, return_counts=True)
    starts = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    seg_of_point = np.repeat(np.arange(len(uniq)), counts)

    pts = cloud.xyz[idx]
    feats = np.empty((len(idx), POINT_FEATURE_DIM))
    # absolute coordinates normalized to about unit scale so every feature
    # column carries comparable gradient signal
    half_x = 0.5 * (grid.x_range[1] - grid.x_range[0])
    half_y = 0.5 * (grid.y_range[1] - grid.y_range[0])
    mid_x = 0.5 * (grid.x_range[1] + grid.x_range[0])
    mid_y = 0.5 * (grid.y_range[1] + grid.y_range[0])
    feats[:, 0] = (pts[:, 0] - mid_x) / half_x
    feats[:, 1] = (pts[:, 1] - mid_y) / half_y
    feats[:, 2] = pts[:, 2] / 3.0
    feats[:, 3] = cloud.intensity[idx]
    # offsets to the pillar centroid
    sums = np.zeros((len(uniq), 3))
    np.add.at(sums, seg_of_point, pts)
    centroid = sums / counts[:, None]
    feats[:, 4:7] = pts - centroid[seg_of_point]
    # offsets to the cell center, in cell units
    cx = grid.x_range[0] + (uniq % grid.w + 0.5) * grid.cell_w
    cy = grid.y_range[0] + (uniq // grid.w + 0.5) * grid.cell_h
    feats[:, 7] = (pts[:, 0] - cx[seg_of_point]) / grid.cell_w
    feats[:, 8] = (pts[:, 1] - cy[seg_of_point]) / grid.cell_h

    w = params[f"{prefix}.weight"]
    b = params[f"{prefix}.bias"]
    embedded = relu(add(matmul(Tensor(feats), w), b))
    pooled = segment_max(embedded, starts)
    out = scatter_to_grid(pooled, uniq, grid.h, grid.w)
    return BEVFeature(out, grid, dropped)


def encode_backbone(bev: BEVFeature, params: ParamSet, prefix: str = "backbone") -> BEVFeature:
    """Two 3x3 conv + group-norm + relu blocks at constant resolution."""
    c = bev.grid.c
    if bev.tensor.shape[0] != c:
        raise InvalidArgumentError(f"backbone expects {c} channels, got {bev.tensor.shape}")
    g = norm_groups(c)
    h = bev.tensor
    for i in (1, 2):
        h = conv_gn_act(
            h,
            params[f"{prefix}.conv{i}.weight"],
            params[f"{prefix}.conv{i}.bias"],
            params[f"{prefix}.gn{i}.scale"],
            params[f"{prefix}.gn{i}.shift"],
            g,
            padding=1,
        )
    return BEVFeature(h, bev.grid, bev.num_dropped)
