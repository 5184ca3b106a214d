"""Planar geometry: SE(2) poses, oriented BEV boxes, exact rotated IoU, NMS."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    r = (a + math.pi) % (2.0 * math.pi) - math.pi
    if r <= -math.pi:
        r = math.pi
    return r


@dataclass(frozen=True)
class PoseSE2:
    """Planar pose: position in meters, heading in radians, yaw in (-pi, pi]."""

    x: float
    y: float
    yaw: float

    def __post_init__(self):
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s], [s, c]])

    def apply(self, xy: np.ndarray) -> np.ndarray:
        """Map local 2D points (n, 2) into the parent frame."""
        return xy @ self.rotation().T + np.array([self.x, self.y])

    def inverse_apply(self, xy: np.ndarray) -> np.ndarray:
        return (xy - np.array([self.x, self.y])) @ self.rotation()


def relative_pose(src: PoseSE2, dst: PoseSE2) -> PoseSE2:
    """Pose of src expressed in dst's frame (dst^-1 * src)."""
    dx, dy = src.x - dst.x, src.y - dst.y
    c, s = math.cos(dst.yaw), math.sin(dst.yaw)
    return PoseSE2(c * dx + s * dy, -s * dx + c * dy, src.yaw - dst.yaw)


@dataclass
class BoxBEV:
    """Oriented box on the ground plane. l runs along the heading, w across it."""

    cx: float
    cy: float
    w: float
    l: float
    yaw: float
    score: float = 1.0

    def area(self) -> float:
        return self.w * self.l

    def corners(self) -> np.ndarray:
        """Counter-clockwise corner coordinates, shape (4, 2)."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = 0.5 * self.l, 0.5 * self.w
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.cx, self.cy])


def transform_box(box: BoxBEV, src: PoseSE2, dst: PoseSE2) -> BoxBEV:
    """Re-express a box given in src's frame in dst's frame."""
    if src == dst:
        return BoxBEV(box.cx, box.cy, box.w, box.l, box.yaw, box.score)
    rel = relative_pose(src, dst)
    cx, cy = rel.apply(np.array([[box.cx, box.cy]]))[0]
    return BoxBEV(float(cx), float(cy), box.w, box.l, wrap_angle(box.yaw + rel.yaw), box.score)


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of a simple polygon given as (n, 2) vertices."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex subject polygon by a convex CCW clip polygon."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp = out
        out = []
        px, py = inp[-1]
        p_side = ex * (py - ay) - ey * (px - ax)
        for cx, cy in inp:
            c_side = ex * (cy - ay) - ey * (cx - ax)
            c_in = c_side >= 0.0
            p_in = p_side >= 0.0
            if c_in:
                if not p_in:
                    t = p_side / (p_side - c_side)
                    out.append((px + t * (cx - px), py + t * (cy - py)))
                out.append((cx, cy))
            elif p_in:
                t = p_side / (p_side - c_side)
                out.append((px + t * (cx - px), py + t * (cy - py)))
            px, py, p_side = cx, cy, c_side
    return np.array(out) if out else np.zeros((0, 2))


def rotated_iou(a: BoxBEV, b: BoxBEV) -> float:
    """Exact IoU of two oriented rectangles via convex polygon clipping."""
    area_a, area_b = a.area(), b.area()
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    # cheap reject: circumscribed circles
    r = 0.5 * math.hypot(a.w, a.l) + 0.5 * math.hypot(b.w, b.l)
    if (a.cx - b.cx) ** 2 + (a.cy - b.cy) ** 2 > r * r:
        return 0.0
    inter = polygon_area(clip_convex(a.corners(), b.corners()))
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def nms(boxes: list[BoxBEV], iou_thresh: float) -> list[BoxBEV]:
    """Greedy non-maximum suppression, highest score first. Ties break by
    input order so results are deterministic."""
    if not 0.0 <= iou_thresh <= 1.0:
        raise InvalidArgumentError(f"nms iou threshold {iou_thresh} outside [0, 1]")
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    keep: list[BoxBEV] = []
    for i in order:
        cand = boxes[i]
        if all(rotated_iou(cand, k) < iou_thresh for k in keep):
            keep.append(cand)
    return keep
