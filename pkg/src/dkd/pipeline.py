"""Training loops, baselines, evaluation protocol, and report assembly."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .bev import BEVFeature, BEVGridConfig
from .corruption import CORRUPTION_KINDS, apply_corruption
from .detect import (
    DetectionMap,
    assign_targets,
    compose_losses,
    decode_and_nms,
    focal_loss,
    head_forward,
    kd_feature_loss,
    kd_output_loss,
    smooth_l1_loss,
)
from .diffusion import build_schedule, refine_train
from .errors import InvalidArgumentError, NumericError, UndefinedMetricError
from .geometry import BoxBEV, nms, transform_box
from .metrics import compute_rce_mrce, dataset_average_precision
from .models import (
    TeacherOutputs,
    aligned_clouds,
    encode_cloud,
    infer_model_kind,
    init_student_params,
    init_teacher_params,
    student_encode_agents,
    student_fuse_and_detect,
    student_infer,
    teacher_forward,
)
from .params import ParamSet, adam_step
from .rng import derive_rng, derive_seed
from .scene import Scene, SceneConfig, generate_scene
from .tensor import Tensor, backward, mul, no_grad

POSE_SWEEP_DEFAULT = ((0.0, 0.0), (0.1, 0.1), (0.2, 0.2), (0.3, 0.3), (0.4, 0.4))


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs; flat, explicit, hashable."""

    # data
    scenes_train: int = 200
    scenes_eval: int = 50
    num_agents: int = 3
    num_objects: int = 8
    num_beams: int = 32
    points_per_beam: int = 300
    extent: float = 24.0  # half-size of the square BEV region, meters
    grid_hw: int = 64
    channels: int = 12
    max_points_per_pillar: int = 32
    # training
    epochs: int = 15
    batch_size: int = 1
    lr: float = 1e-3
    seed: int = 0
    # diffusion
    diffusion_t: int = 100
    beta_min: float = 1e-4
    beta_max: float = 0.06
    sample_steps: int = 10
    denoiser_width: int = 8
    train_refine_mode: str = "x0"
    # toggles
    use_pkd: bool = True
    use_agf: bool = True
    use_lgm_teacher: bool = True
    warm_start_student: bool = True
    # evaluation
    corruptions: tuple = CORRUPTION_KINDS
    severity: float = 0.5
    score_thresh: float = 0.05
    nms_iou: float = 0.2
    pose_sweep: tuple = POSE_SWEEP_DEFAULT
    noise_ego: bool = False

    def grid(self) -> BEVGridConfig:
        e = self.extent
        return BEVGridConfig(
            x_range=(-e, e),
            y_range=(-e, e),
            h=self.grid_hw,
            w=self.grid_hw,
            c=self.channels,
            max_points_per_pillar=self.max_points_per_pillar,
        )

    def scene_config(self) -> SceneConfig:
        e = self.extent
        return SceneConfig(
            extent=(-e, e, -e, e),
            num_agents=self.num_agents,
            num_objects=self.num_objects,
            num_beams=self.num_beams,
            points_per_beam=self.points_per_beam,
        )

    def schedule(self):
        return build_schedule(self.diffusion_t, self.beta_min, self.beta_max)

    def content_hash(self) -> str:
        text = ";".join(f"{k}={v!r}" for k, v in sorted(asdict(self).items()))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    @staticmethod
    def for_profile(name: str) -> "RunConfig":
        """Named agent-count profiles; 'desk' is the default synthetic one."""
        profiles = {"desk": 3, "opv2v": 5, "dair": 2}
        if name not in profiles:
            raise InvalidArgumentError(f"unknown profile {name!r}; expected one of {sorted(profiles)}")
        return RunConfig(num_agents=profiles[name])


def build_dataset(config: RunConfig, split: str) -> list[Scene]:
    """Deterministic scene list for a split; seeds never collide across splits."""
    n = config.scenes_train if split == "train" else config.scenes_eval
    scfg = config.scene_config()
    base = derive_seed(config.seed, "dataset", split)
    return [generate_scene(scfg, derive_seed(base, i)) for i in range(n)]


def _check_finite(value: float, what: str, step: int) -> None:
    if not math.isfinite(value):
        raise NumericError(f"non-finite {what} at step {step}")


def _epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return derive_rng(seed, "order", epoch).permutation(n)


def _cosine_lr(base: float, epoch: int, total: int) -> float:
    """Training keeps the initial rate: at a few thousand steps any decay
    starves late learning (measured, not assumed)."""
    return base


def train_teacher(dataset: list[Scene], config: RunConfig) -> tuple[ParamSet, list[dict]]:
    """Early-fusion detector on clean data: merge aligned clouds, encode,
    optionally gate, detect; minimize the detection losses with Adam."""
    if not dataset:
        raise InvalidArgumentError("training dataset is empty")
    grid = config.grid()
    params = init_teacher_params(config.seed, config.channels, config.use_lgm_teacher)
    targets = [assign_targets(s.gt_boxes, grid) for s in dataset]
    clouds = [aligned_clouds(s, None, False, 0) for s in dataset]
    history: list[dict] = []
    step = 0
    inv_b = 1.0 / config.batch_size
    for epoch in range(config.epochs):
        lr = _cosine_lr(config.lr, epoch, config.epochs)
        order = _epoch_order(len(dataset), config.seed, epoch)
        for k, idx in enumerate(order):
            out = teacher_forward(clouds[idx], grid, params)
            l_cls = focal_loss(out.det.cls_logits, targets[idx])
            l_reg = smooth_l1_loss(out.det.reg, targets[idx])
            loss = l_cls + l_reg
            _check_finite(loss.item(), "teacher loss", step)
            backward(mul(loss, inv_b))
            history.append(
                {"epoch": epoch, "step": step, "l_cls": l_cls.item(), "l_reg": l_reg.item(), "l_final": loss.item()}
            )
            step += 1
            if step % config.batch_size == 0:
                adam_step(params, lr=lr)
        if step % config.batch_size:
            adam_step(params, lr=lr)
    return params, history


def train_ego_detector(dataset: list[Scene], config: RunConfig) -> tuple[ParamSet, list[dict]]:
    """The no-collaboration detector: identical architecture and recipe to
    the teacher, but it only ever sees the ego agent's own cloud."""
    ego_only = []
    for s in dataset:
        ego_only.append(Scene([s.agents[0]], s.gt_boxes, s.seed, s.config))
    return train_teacher(ego_only, config)


@dataclass
class _TeacherCache:
    feature: np.ndarray
    enhanced: np.ndarray
    cls_logits: np.ndarray
    reg: np.ndarray


def _freeze_teacher(dataset, clouds, grid, teacher: ParamSet) -> list[_TeacherCache]:
    out = []
    with no_grad():
        for s, cl in zip(dataset, clouds):
            t = teacher_forward(cl, grid, teacher)
            out.append(
                _TeacherCache(t.feature.tensor.data, t.enhanced.tensor.data, t.det.cls_logits.data, t.det.reg.data)
            )
    return out


def train_student(dataset: list[Scene], teacher: ParamSet, config: RunConfig) -> tuple[ParamSet, list[dict]]:
    """Distillation training of the collaborative student against a frozen
    teacher. Per scene: encode each agent, optionally restore features
    through the conditioned diffusion module, fuse, and minimize the full
    composed objective."""
    if not dataset:
        raise InvalidArgumentError("training dataset is empty")
    grid = config.grid()
    if teacher["pillar.weight"].shape[1] != config.channels:
        raise InvalidArgumentError(
            f"teacher was trained at {teacher['pillar.weight'].shape[1]} channels, config wants {config.channels}"
        )
    params = init_student_params(
        config.seed, config.channels, config.use_pkd, config.use_agf, denoiser_width=config.denoiser_width
    )
    if config.warm_start_student:
        # the student shares the teacher's encoder and head design; starting
        # from the trained weights gives every agent detection-grade local
        # features from step one (the gated fusion stays at its identity init)
        for path, t in teacher.items():
            if path.split(".")[0] in ("pillar", "backbone", "head") and path in params:
                params[path].data[:] = t.data
    schedule = config.schedule() if config.use_pkd else None
    targets = [assign_targets(s.gt_boxes, grid) for s in dataset]
    clouds = [aligned_clouds(s, None, False, 0) for s in dataset]
    cache = _freeze_teacher(dataset, clouds, grid, teacher)

    history: list[dict] = []
    step = 0
    inv_b = 1.0 / config.batch_size
    zero = Tensor(0.0)
    for epoch in range(config.epochs):
        lr = _cosine_lr(config.lr, epoch, config.epochs)
        order = _epoch_order(len(dataset), config.seed, epoch)
        for idx in order:
            tc = cache[idx]
            feats = student_encode_agents(clouds[idx], grid, params)
            if config.use_pkd:
                t_feat = BEVFeature(Tensor(tc.feature), grid)
                l_diff_sum = None
                refined = []
                for i, f in enumerate(feats):
                    l_i, f_hat = refine_train(
                        t_feat,
                        f,
                        schedule,
                        params,
                        derive_seed(config.seed, "refine", epoch, int(idx), i),
                        sample_steps=config.sample_steps,
                        refine_mode=config.train_refine_mode,
                    )
                    refined.append(f_hat)
                    l_diff_sum = l_i if l_diff_sum is None else l_diff_sum + l_i
            else:
                refined = feats
                l_diff_sum = zero
            fused, det = student_fuse_and_detect(refined, params, config.use_agf)
            if config.use_pkd:
                l_kd_feat = kd_feature_loss(fused, BEVFeature(Tensor(tc.enhanced), grid))
                l_kd_cls, l_kd_reg = kd_output_loss(det, DetectionMap(Tensor(tc.cls_logits), Tensor(tc.reg)))
            else:
                l_kd_feat = l_kd_cls = l_kd_reg = zero
            l_cls = focal_loss(det.cls_logits, targets[idx])
            l_reg = smooth_l1_loss(det.reg, targets[idx])
            bundle = compose_losses(l_diff_sum, l_kd_feat, l_kd_cls, l_kd_reg, l_cls, l_reg)
            _check_finite(bundle.l_final.item(), "student loss", step)
            backward(mul(bundle.l_final, inv_b))
            row = bundle.scalars()
            row.update({"epoch": epoch, "step": step})
            history.append(row)
            step += 1
            if step % config.batch_size == 0:
                adam_step(params, lr=lr)
        if step % config.batch_size:
            adam_step(params, lr=lr)
    return params, history


# --------------------------------------------------------------------------
# inference wrappers
# --------------------------------------------------------------------------


def _corrupt_clouds(scene: Scene, kind: str | None, severity: float, extent: tuple) -> Scene:
    if kind is None:
        return scene
    agents = []
    for i, (pose, cloud) in enumerate(scene.agents):
        seeded = derive_seed(scene.seed, "eval_corruption", kind, i)
        agents.append((pose, apply_corruption(cloud, kind, severity, seeded, extent)))
    return Scene(agents, scene.gt_boxes, scene.seed, scene.config)


def make_student_inferencer(params: ParamSet, config: RunConfig):
    kind = infer_model_kind(params)
    schedule = config.schedule() if kind["has_denoiser"] else None

    def infer(scene: Scene, pose_noise=None) -> list[BoxBEV]:
        clouds = aligned_clouds(scene, pose_noise, config.noise_ego, config.seed)
        with no_grad():
            out = student_infer(
                clouds,
                config.grid(),
                params,
                schedule,
                config.sample_steps,
                derive_seed(scene.seed, "infer"),
                kind["has_agf"],
            )
        return decode_and_nms(out.det, config.grid(), config.score_thresh, config.nms_iou)

    return infer


def make_teacher_inferencer(params: ParamSet, config: RunConfig):
    def infer(scene: Scene, pose_noise=None) -> list[BoxBEV]:
        clouds = aligned_clouds(scene, pose_noise, config.noise_ego, config.seed)
        with no_grad():
            out = teacher_forward(clouds, config.grid(), params)
        return decode_and_nms(out.det, config.grid(), config.score_thresh, config.nms_iou)

    return infer


def make_no_collab_inferencer(params: ParamSet, config: RunConfig):
    def infer(scene: Scene, pose_noise=None) -> list[BoxBEV]:
        _, ego_cloud = scene.agents[0]
        with no_grad():
            out = teacher_forward([ego_cloud], config.grid(), params)
        return decode_and_nms(out.det, config.grid(), config.score_thresh, config.nms_iou)

    return infer


def make_late_fusion_inferencer(params: ParamSet, config: RunConfig):
    """Run the single-agent detector per agent in its own frame, move the
    boxes into the ego frame, merge with NMS."""

    def infer(scene: Scene, pose_noise=None) -> list[BoxBEV]:
        from .scene import inject_pose_noise

        ego_pose = scene.agents[0][0]
        merged: list[BoxBEV] = []
        for i, (pose, cloud) in enumerate(scene.agents):
            with no_grad():
                out = teacher_forward([cloud], config.grid(), params)
            boxes = decode_and_nms(out.det, config.grid(), config.score_thresh, config.nms_iou)
            if pose_noise is not None and i > 0:
                sl, sh = pose_noise
                pose = inject_pose_noise(pose, sl, sh, derive_seed(config.seed, scene.seed, "pose", i))
            merged.extend(transform_box(b, pose, ego_pose) for b in boxes)
        return nms(merged, config.nms_iou)

    return infer


def make_mean_fusion_inferencer(params: ParamSet, config: RunConfig):
    """Zero-training intermediate fusion: the single-agent detector's encoder
    and head around an unweighted feature mean. If the detector carries a
    gating block it is applied exactly as in its own forward pass, so with a
    single agent this path agrees with the ego-only baseline bit for bit."""
    from .fusion import lgm, mean_fuse
    from .models import encode_cloud

    def infer(scene: Scene, pose_noise=None) -> list[BoxBEV]:
        clouds = aligned_clouds(scene, pose_noise, config.noise_ego, config.seed)
        grid = config.grid()
        with no_grad():
            feats = [encode_cloud(c, grid, params) for c in clouds]
            fused = mean_fuse(feats)
            if "lgm.b1.reduce.weight" in params:
                fused = lgm(fused, fused, params, "lgm")
            det = head_forward(fused, params)
        return decode_and_nms(det, config.grid(), config.score_thresh, config.nms_iou)

    return infer


INFERENCER_FACTORIES = {
    "student": make_student_inferencer,
    "teacher": make_teacher_inferencer,
    "no-collab": make_no_collab_inferencer,
    "late-fusion": make_late_fusion_inferencer,
    "mean-fusion": make_mean_fusion_inferencer,
}


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


def evaluate_condition(infer, dataset: list[Scene], config: RunConfig, kind: str | None, pose_noise=None) -> tuple:
    """(AP@0.5, AP@0.7) over the whole split under one condition."""
    e = config.extent
    per_scene = []
    for scene in dataset:
        s = _corrupt_clouds(scene, kind, config.severity, (-e, e, -e, e))
        preds = infer(s, pose_noise)
        per_scene.append((preds, s.gt_boxes))
    ap50 = dataset_average_precision(per_scene, 0.5)
    ap70 = dataset_average_precision(per_scene, 0.7)
    return ap50, ap70


@dataclass
class EvalReport:
    model: str
    conditions: dict  # name -> (ap50, ap70); "clean" always present
    rce50: float | None  # None when clean AP is zero (robustness undefined)
    rce70: float | None
    mrce: float | None
    pose_rows: list  # (sigma_loc, sigma_head, ap50, ap70)
    metadata: dict = field(default_factory=dict)


def evaluate_model(
    infer,
    dataset: list[Scene],
    config: RunConfig,
    model_name: str = "model",
    with_pose_sweep: bool = False,
) -> EvalReport:
    """Clean plus per-corruption AP, robustness summary, optional pose sweep."""
    conditions: dict = {}
    conditions["clean"] = evaluate_condition(infer, dataset, config, None)
    for kind in config.corruptions:
        conditions[kind] = evaluate_condition(infer, dataset, config, kind)
    corrupted = [conditions[k] for k in config.corruptions]
    if corrupted:
        try:
            rce50, rce70, mrce = compute_rce_mrce(conditions["clean"], corrupted)
        except UndefinedMetricError:
            rce50 = rce70 = mrce = None
    else:
        rce50 = rce70 = mrce = None
    pose_rows = (
        pose_sweep(infer, dataset, config.pose_sweep, config, clean_row=conditions["clean"])
        if with_pose_sweep
        else []
    )
    return EvalReport(
        model=model_name,
        conditions=conditions,
        rce50=rce50,
        rce70=rce70,
        mrce=mrce,
        pose_rows=pose_rows,
        metadata={"config_hash": config.content_hash(), "seed": config.seed, "severity": config.severity},
    )


def pose_sweep(infer, dataset: list[Scene], sigma_grid, config: RunConfig, clean_row: tuple | None = None) -> list[tuple]:
    """AP under increasing collaborator pose noise. The (0, 0) row is exactly
    the clean evaluation (identical seeds), so a precomputed clean result can
    stand in for it."""
    rows = []
    for sl, sh in sigma_grid:
        if sl == 0.0 and sh == 0.0:
            ap50, ap70 = clean_row if clean_row is not None else evaluate_condition(infer, dataset, config, None)
        else:
            ap50, ap70 = evaluate_condition(infer, dataset, config, None, pose_noise=(sl, sh))
        rows.append((sl, sh, ap50, ap70))
    return rows


def baselines(dataset: list[Scene], ego_params: ParamSet, config: RunConfig) -> dict:
    """Evaluate the three internal baselines that share one single-agent
    detector: ego-only, late box fusion, and unweighted feature-mean fusion."""
    out = {}
    for name in ("no-collab", "late-fusion", "mean-fusion"):
        infer = INFERENCER_FACTORIES[name](ego_params, config)
        out[name] = evaluate_model(infer, dataset, config, model_name=name)
    return out
