"""Model assembly: parameter initialization and forward passes for the
holistic-view detector (teacher), the per-agent collaborative detector
(student), and the single-agent baseline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bev import BEVFeature, BEVGridConfig, encode_backbone, init_backbone_params, init_pillar_params, pillarize
from .detect import DetectionMap, head_forward, init_head_params
from .diffusion import NoiseSchedule, init_denoiser_params, refine_infer
from .errors import InvalidArgumentError
from .fusion import agf_fuse, init_agf_params, init_lgm_params, lgm, mean_fuse
from .geometry import PoseSE2
from .params import ParamSet
from .rng import derive_rng, derive_seed
from .scene import PointCloud, Scene, inject_pose_noise, transform_to_ego


def init_teacher_params(seed: int, c: int, use_lgm: bool) -> ParamSet:
    ps = ParamSet()
    rng = derive_rng(seed, "teacher_init")
    init_pillar_params(ps, rng, c)
    init_backbone_params(ps, rng, c)
    if use_lgm:
        init_lgm_params(ps, rng, c, "lgm")
    init_head_params(ps, rng, c)
    return ps


def init_student_params(seed: int, c: int, use_pkd: bool, use_agf: bool, denoiser_width: int | None = None) -> ParamSet:
    ps = ParamSet()
    rng = derive_rng(seed, "student_init")
    init_pillar_params(ps, rng, c)
    init_backbone_params(ps, rng, c)
    if use_pkd:
        init_denoiser_params(ps, rng, c, width=denoiser_width)
    if use_agf:
        init_agf_params(ps, rng, c)
    init_head_params(ps, rng, c)
    return ps


def encode_cloud(cloud: PointCloud, grid: BEVGridConfig, params: ParamSet) -> BEVFeature:
    """Shared encoder: pillar embedding plus convolutional backbone."""
    return encode_backbone(pillarize(cloud, grid, params), params)


def aligned_clouds(scene: Scene, pose_noise: tuple | None, noise_ego: bool, noise_seed: int) -> list[PointCloud]:
    """Each agent's cloud expressed in the ego frame, optionally through
    noisy pose estimates for the collaborators (index 0 stays exact unless
    noise_ego is set)."""
    ego_pose = scene.agents[0][0]
    out = []
    for i, (pose, cloud) in enumerate(scene.agents):
        if pose_noise is not None and (i > 0 or noise_ego):
            sl, sh = pose_noise
            pose = inject_pose_noise(pose, sl, sh, derive_seed(noise_seed, scene.seed, "pose", i))
        out.append(transform_to_ego(cloud, pose, ego_pose))
    return out


@dataclass
class TeacherOutputs:
    feature: BEVFeature  # encoder output F
    enhanced: BEVFeature  # after self-conditioned gating (or F itself)
    det: DetectionMap


def teacher_forward(clouds_ego_frame: list[PointCloud], grid: BEVGridConfig, params: ParamSet) -> TeacherOutputs:
    """Early fusion: merge every aligned cloud, encode once, optionally gate
    the global feature against itself, then detect."""
    merged = PointCloud.merge(clouds_ego_frame)
    feat = encode_cloud(merged, grid, params)
    enhanced = lgm(feat, feat, params, "lgm") if "lgm.b1.reduce.weight" in params else feat
    det = head_forward(enhanced, params)
    return TeacherOutputs(feat, enhanced, det)


@dataclass
class StudentOutputs:
    per_agent: list  # encoder features per agent
    refined: list  # restored features entering fusion
    fused: BEVFeature
    det: DetectionMap


def student_encode_agents(clouds_ego_frame: list[PointCloud], grid: BEVGridConfig, params: ParamSet) -> list[BEVFeature]:
    return [encode_cloud(c, grid, params) for c in clouds_ego_frame]


def student_fuse_and_detect(refined: list[BEVFeature], params: ParamSet, use_agf: bool) -> tuple[BEVFeature, DetectionMap]:
    fused = agf_fuse(refined, params) if use_agf else mean_fuse(refined)
    return fused, head_forward(fused, params)


def student_infer(
    clouds_ego_frame: list[PointCloud],
    grid: BEVGridConfig,
    params: ParamSet,
    schedule: NoiseSchedule | None,
    sample_steps: int,
    gen_seed: int,
    use_agf: bool,
) -> StudentOutputs:
    """Deployment path: encode each agent, restore from pure noise when the
    diffusion module is present, fuse, detect. The teacher is never touched."""
    feats = student_encode_agents(clouds_ego_frame, grid, params)
    if schedule is not None and "denoiser.stem.weight" in params:
        refined = [
            refine_infer(f, schedule, params, derive_seed(gen_seed, "gen", i), sample_steps)
            for i, f in enumerate(feats)
        ]
    else:
        refined = feats
    fused, det = student_fuse_and_detect(refined, params, use_agf)
    return StudentOutputs(feats, refined, fused, det)


def infer_model_kind(params: ParamSet) -> dict:
    """Param files are self-describing: module prefixes reveal the trained
    configuration."""
    return {
        "has_denoiser": "denoiser.stem.weight" in params,
        "has_agf": "agf.lgm.b1.reduce.weight" in params,
        "has_lgm": "lgm.b1.reduce.weight" in params,
    }
