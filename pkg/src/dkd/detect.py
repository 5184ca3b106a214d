"""Anchor-free detection head, target encoding, and the full loss stack:
focal / smooth-L1 detection losses plus the feature- and output-level
distillation divergences, composed into one unweighted objective."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bev import BEVFeature, BEVGridConfig
from .errors import InvalidArgumentError
from .geometry import BoxBEV, nms, wrap_angle
from .params import ParamSet
from .tensor import (
    Tensor,
    absolute,
    add,
    conv2d,
    exp,
    log_sigmoid,
    log_softmax,
    mul,
    power,
    sigmoid,
    sub,
    sum as tsum,
    where_mask,
)

REG_CHANNELS = 6  # dx, dy, log w, log l, sin yaw, cos yaw

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
SMOOTH_L1_BETA = 1.0


@dataclass
class DetectionMap:
    cls_logits: Tensor  # (1, H, W)
    reg: Tensor  # (6, H, W)


@dataclass
class TargetMap:
    cls_target: np.ndarray  # (1, H, W) of {0, 1}
    reg_target: np.ndarray  # (6, H, W), defined on positive cells
    positive_mask: np.ndarray  # (H, W) bool


@dataclass
class LossBundle:
    """All loss terms of one training step. The composites are exact
    unweighted sums: post = feat + cls + reg distillation; the restoration
    losses add to post; detection losses close the total."""

    l_diff_sum: Tensor
    l_kd_feat: Tensor
    l_kd_cls: Tensor
    l_kd_reg: Tensor
    l_kd_post: Tensor
    l_pkd: Tensor
    l_cls: Tensor
    l_reg: Tensor
    l_final: Tensor

    def scalars(self) -> dict:
        return {k: float(getattr(self, k).data) for k in (
            "l_diff_sum", "l_kd_feat", "l_kd_cls", "l_kd_reg", "l_kd_post",
            "l_pkd", "l_cls", "l_reg", "l_final",
        )}


def init_head_params(ps: ParamSet, rng: np.random.Generator, c: int, prefix: str = "head") -> None:
    ps.add(f"{prefix}.cls.weight", rng.normal(0.0, 0.01, size=(1, c, 1, 1)))
    # bias so that initial foreground probability is ~1%: keeps early focal loss small
    ps.add(f"{prefix}.cls.bias", np.full(1, -math.log(99.0)))
    ps.add(f"{prefix}.reg.weight", rng.normal(0.0, 0.01, size=(REG_CHANNELS, c, 1, 1)))
    ps.add(f"{prefix}.reg.bias", np.zeros(REG_CHANNELS))


def head_forward(feature: BEVFeature, params: ParamSet, prefix: str = "head") -> DetectionMap:
    """Two parallel 1x1 convolutions over the fused feature."""
    c = feature.tensor.shape[0]
    if params[f"{prefix}.cls.weight"].shape[1] != c:
        raise InvalidArgumentError(
            f"head expects {params[f'{prefix}.cls.weight'].shape[1]} channels, feature has {c}"
        )
    cls = conv2d(feature.tensor, params[f"{prefix}.cls.weight"], params[f"{prefix}.cls.bias"])
    reg = conv2d(feature.tensor, params[f"{prefix}.reg.weight"], params[f"{prefix}.reg.bias"])
    return DetectionMap(cls, reg)


def canonical_yaw(yaw: float) -> float:
    """Fold a heading into [-pi/2, pi/2): a box footprint is invariant under
    a half-turn, so the regression target must be too."""
    y = wrap_angle(yaw)
    if y >= math.pi / 2:
        y -= math.pi
    elif y < -math.pi / 2:
        y += math.pi
    return y


def assign_targets(gt: list[BoxBEV], grid: BEVGridConfig) -> TargetMap:
    """Mark the cell containing each box center positive and encode the box
    there. Collisions resolve larger-area-first."""
    cls = np.zeros((1, grid.h, grid.w))
    reg = np.zeros((REG_CHANNELS, grid.h, grid.w))
    mask = np.zeros((grid.h, grid.w), dtype=bool)
    for box in sorted(gt, key=lambda b: -b.area()):
        ix = int(math.floor((box.cx - grid.x_range[0]) / grid.cell_w))
        iy = int(math.floor((box.cy - grid.y_range[0]) / grid.cell_h))
        if not (0 <= ix < grid.w and 0 <= iy < grid.h) or mask[iy, ix]:
            continue
        cx_cell = grid.x_range[0] + (ix + 0.5) * grid.cell_w
        cy_cell = grid.y_range[0] + (iy + 0.5) * grid.cell_h
        yaw = canonical_yaw(box.yaw)
        mask[iy, ix] = True
        cls[0, iy, ix] = 1.0
        reg[:, iy, ix] = (
            (box.cx - cx_cell) / grid.cell_w,
            (box.cy - cy_cell) / grid.cell_h,
            math.log(box.w),
            math.log(box.l),
            math.sin(yaw),
            math.cos(yaw),
        )
    return TargetMap(cls, reg, mask)


def decode_and_nms(
    det: DetectionMap,
    grid: BEVGridConfig,
    score_thresh: float = 0.1,
    nms_iou: float = 0.2,
    max_boxes: int = 128,
) -> list[BoxBEV]:
    """Invert the target encoding at confident cells, then greedy rotated NMS."""
    if not (0.0 <= score_thresh <= 1.0 and 0.0 <= nms_iou <= 1.0):
        raise InvalidArgumentError(f"thresholds outside [0,1]: {score_thresh}, {nms_iou}")
    logits = det.cls_logits.data[0]
    scores = 1.0 / (1.0 + np.exp(-logits))
    reg = det.reg.data
    iys, ixs = np.nonzero(scores >= score_thresh)
    if len(iys) == 0:
        return []
    svals = scores[iys, ixs]
    top = np.argsort(-svals, kind="stable")[:max_boxes]
    cand = []
    for k in top:
        iy, ix = int(iys[k]), int(ixs[k])
        dx, dy, lw, ll, sy, cy = reg[:, iy, ix]
        cand.append(
            BoxBEV(
                grid.x_range[0] + (ix + 0.5 + dx) * grid.cell_w,
                grid.y_range[0] + (iy + 0.5 + dy) * grid.cell_h,
                math.exp(lw),
                math.exp(ll),
                wrap_angle(math.atan2(sy, cy)),
                float(svals[k]),
            )
        )
    return nms(cand, nms_iou)


def focal_loss(cls_logits: Tensor, targets: TargetMap, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> Tensor:
    """Alpha-balanced sigmoid focal loss, summed over cells and normalized by
    the positive count (at least 1)."""
    y = targets.cls_target
    if cls_logits.shape != y.shape:
        raise InvalidArgumentError(f"focal shapes differ: {cls_logits.shape} vs {y.shape}")
    n_pos = max(1.0, float(y.sum()))
    p = sigmoid(cls_logits)
    pos = mul(mul(power(sub(1.0, p), gamma), mul(log_sigmoid(cls_logits), -1.0)), alpha)
    neg = mul(mul(power(p, gamma), mul(log_sigmoid(mul(cls_logits, -1.0)), -1.0)), 1.0 - alpha)
    per_cell = add(mul(pos, y), mul(neg, 1.0 - y))
    return mul(tsum(per_cell), 1.0 / n_pos)


def smooth_l1_loss(reg: Tensor, targets: TargetMap, beta: float = SMOOTH_L1_BETA) -> Tensor:
    """Smooth-L1 over the regression channels of positive cells, averaged
    over positives; per-channel weights are all one."""
    if reg.shape != targets.reg_target.shape:
        raise InvalidArgumentError(f"smooth-l1 shapes differ: {reg.shape} vs {targets.reg_target.shape}")
    n_pos = float(targets.positive_mask.sum())
    if n_pos == 0:
        return Tensor(0.0)
    r = sub(reg, targets.reg_target)
    a = absolute(r)
    quad = mul(mul(r, r), 0.5 / beta)
    lin = sub(a, 0.5 * beta)
    per_elem = where_mask(a.data < beta, quad, lin)
    masked = mul(per_elem, targets.positive_mask[None, :, :].astype(np.float64))
    return mul(tsum(masked), 1.0 / n_pos)


def kd_feature_loss(student: BEVFeature, teacher: BEVFeature) -> Tensor:
    """Channel-softmax KL from the student feature to the (constant) teacher
    feature, averaged over spatial locations."""
    if student.tensor.shape != teacher.tensor.shape:
        raise InvalidArgumentError(
            f"feature shapes differ: {student.tensor.shape} vs {teacher.tensor.shape}"
        )
    _, h, w = student.tensor.shape
    ls_s = log_softmax(student.tensor, axis=0)
    p_s = exp(ls_s)
    z = teacher.tensor.data
    z = z - z.max(axis=0, keepdims=True)
    ls_t = z - np.log(np.exp(z).sum(axis=0, keepdims=True))
    kl = tsum(mul(p_s, sub(ls_s, ls_t)))
    return mul(kl, 1.0 / (h * w))


def _bernoulli_kl_from_teacher(student_logits: Tensor, teacher_logits: np.ndarray) -> Tensor:
    """Mean KL(teacher || student) between per-cell Bernoulli distributions."""
    t = teacher_logits
    p_t = 1.0 / (1.0 + np.exp(-t))
    lsp_t = np.minimum(t, 0.0) - np.log1p(np.exp(-np.abs(t)))
    lsn_t = np.minimum(-t, 0.0) - np.log1p(np.exp(-np.abs(t)))
    lsp_s = log_sigmoid(student_logits)
    lsn_s = log_sigmoid(mul(student_logits, -1.0))
    kl = add(
        mul(sub(Tensor(lsp_t), lsp_s), p_t),
        mul(sub(Tensor(lsn_t), lsn_s), 1.0 - p_t),
    )
    n = student_logits.size
    return mul(tsum(kl), 1.0 / n)


def kd_output_loss(student: DetectionMap, teacher: DetectionMap) -> tuple[Tensor, Tensor]:
    """Distillation of the detection outputs: Bernoulli KL for the
    classification map, channel-softmax KL (matching the feature form) for
    the regression map. The teacher side carries no gradient."""
    if student.cls_logits.shape != teacher.cls_logits.shape or student.reg.shape != teacher.reg.shape:
        raise InvalidArgumentError("detection map shapes differ between student and teacher")
    l_cls = _bernoulli_kl_from_teacher(student.cls_logits, teacher.cls_logits.data)

    _, h, w = student.reg.shape
    ls_s = log_softmax(student.reg, axis=0)
    p_s = exp(ls_s)
    z = teacher.reg.data
    z = z - z.max(axis=0, keepdims=True)
    ls_t = z - np.log(np.exp(z).sum(axis=0, keepdims=True))
    l_reg = mul(tsum(mul(p_s, sub(ls_s, ls_t))), 1.0 / (h * w))
    return l_cls, l_reg


def compose_losses(
    l_diff_sum: Tensor,
    l_kd_feat: Tensor,
    l_kd_cls: Tensor,
    l_kd_reg: Tensor,
    l_cls: Tensor,
    l_reg: Tensor,
) -> LossBundle:
    """Exact unweighted composition of every term into the final objective."""
    l_kd_post = add(add(l_kd_feat, l_kd_cls), l_kd_reg)
    l_pkd = add(l_diff_sum, l_kd_post)
    l_final = add(add(l_pkd, l_cls), l_reg)
    return LossBundle(
        l_diff_sum=l_diff_sum,
        l_kd_feat=l_kd_feat,
        l_kd_cls=l_kd_cls,
        l_kd_reg=l_kd_reg,
        l_kd_post=l_kd_post,
        l_pkd=l_pkd,
        l_cls=l_cls,
        l_reg=l_reg,
        l_final=l_final,
    )
