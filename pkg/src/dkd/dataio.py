"""File formats and run artifacts.

Dataset files (magic ``DKDS``, little-endian): a fixed header carrying the
geometry every consumer needs, then one record per scene with agent poses,
columnar point arrays and ground-truth boxes. Reports are JSON (machine) and
CSV (tables); every run directory gets a manifest holding the exact
configuration so any output is regenerable from it.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DataFormatError, InvalidArgumentError
from .geometry import BoxBEV, PoseSE2
from .pipeline import EvalReport, RunConfig
from .scene import PointCloud, Scene, SceneConfig

DATASET_MAGIC = b"DKDS"
DATASET_VERSION = 1


def write_dataset(scenes: list[Scene], path) -> None:
    if not scenes:
        raise InvalidArgumentError("refusing to write an empty dataset")
    cfg = scenes[0].config
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<II", DATASET_VERSION, len(scenes)))
        f.write(struct.pack("<4d", *cfg.extent))
        f.write(struct.pack("<Idd", cfg.num_beams, cfg.max_range, cfg.sensor_height))
        for scene in scenes:
            f.write(struct.pack("<qI", scene.seed, len(scene.agents)))
            for pose, cloud in scene.agents:
                f.write(struct.pack("<3d", pose.x, pose.y, pose.yaw))
                n = len(cloud)
                f.write(struct.pack("<I", n))
                f.write(cloud.xyz.astype("<f8").tobytes())
                f.write(cloud.intensity.astype("<f8").tobytes())
                f.write(cloud.beam_id.astype("<i4").tobytes())
                f.write(cloud.range_m.astype("<f8").tobytes())
                f.write(cloud.surface.astype("u1").tobytes())
            f.write(struct.pack("<I", len(scene.gt_boxes)))
            for b in scene.gt_boxes:
                f.write(struct.pack("<6d", b.cx, b.cy, b.w, b.l, b.yaw, b.score))


def read_dataset(path) -> list[Scene]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != DATASET_MAGIC:
        raise DataFormatError(f"{path}: bad magic {raw[:4]!r}, expected {DATASET_MAGIC!r}")
    off = 4

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(raw):
            raise DataFormatError(f"{path}: truncated at offset {off}")
        vals = struct.unpack_from(fmt, raw, off)
        off += size
        return vals

    version, n_scenes = take("<II")
    if version != DATASET_VERSION:
        raise DataFormatError(f"{path}: unsupported dataset version {version}")
    extent = take("<4d")
    num_beams, max_range, sensor_height = take("<Idd")
    cfg = SceneConfig(extent=extent, num_beams=int(num_beams), max_range=max_range, sensor_height=sensor_height)

    def array(dtype, count, shape=None):
        nonlocal off
        a = np.frombuffer(raw, dtype=dtype, count=count, offset=off)
        off += a.nbytes
        return a.reshape(shape).copy() if shape else a.copy()

    scenes = []
    for _ in range(n_scenes):
        seed, n_agents = take("<qI")
        agents = []
        for _ in range(n_agents):
            x, y, yaw = take("<3d")
            (n,) = take("<I")
            cloud = PointCloud(
                array("<f8", 3 * n, (n, 3)),
                array("<f8", n),
                array("<i4", n).astype(np.int32),
                array("<f8", n),
                array("u1", n),
                int(num_beams),
                sensor_height,
            )
            agents.append((PoseSE2(x, y, yaw), cloud))
        (n_boxes,) = take("<I")
        boxes = [BoxBEV(*take("<6d")) for _ in range(n_boxes)]
        scenes.append(Scene(agents, boxes, int(seed), cfg))
    return scenes


# -- run configuration files -------------------------------------------------

_SECTIONS = {
    "data": (
        "scenes_train", "scenes_eval", "num_agents", "num_objects", "num_beams",
        "points_per_beam", "extent", "grid_hw", "channels", "max_points_per_pillar",
    ),
    "train": ("epochs", "batch_size", "lr", "seed"),
    "diffusion": ("diffusion_t", "beta_min", "beta_max", "sample_steps", "denoiser_width", "train_refine_mode"),
    "toggles": ("use_pkd", "use_agf", "use_lgm_teacher", "warm_start_student"),
    "eval": ("corruptions", "severity", "score_thresh", "nms_iou", "pose_sweep", "noise_ego"),
}


def config_to_text(config: RunConfig) -> str:
    lines = []
    d = dataclasses.asdict(config)
    for section, keys in _SECTIONS.items():
        lines.append(f"[{section}]")
        for k in keys:
            v = d[k]
            if k == "corruptions":
                v = ",".join(v)
            elif k == "pose_sweep":
                v = ";".join(f"{a},{b}" for a, b in v)
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)


def save_config(config: RunConfig, path) -> None:
    Path(path).write_text(config_to_text(config), encoding="utf-8")


def _coerce(name: str, text: str):
    field = {f.name: f for f in dataclasses.fields(RunConfig)}[name]
    if name == "corruptions":
        return tuple(s.strip() for s in text.split(",") if s.strip())
    if name == "pose_sweep":
        pairs = []
        for part in text.split(";"):
            a, b = part.split(",")
            pairs.append((float(a), float(b)))
        return tuple(pairs)
    if field.type == "bool" or isinstance(field.default, bool):
        low = text.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise DataFormatError(f"config key {name}: bad boolean {text!r}")
    if isinstance(field.default, int) and not isinstance(field.default, bool):
        return int(text)
    if isinstance(field.default, float):
        return float(text)
    return text.strip()


def load_config(path, overrides: dict | None = None) -> RunConfig:
    """Read a key = value config file with sections; unknown keys are errors.
    Values in `overrides` (CLI flags) win over file values."""
    parser = configparser.ConfigParser()
    try:
        with open(path, "r", encoding="utf-8") as f:
            parser.read_file(f)
    except configparser.Error as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
    known = {f.name for f in dataclasses.fields(RunConfig)}
    values: dict = {}
    for section in parser.sections():
        for key, text in parser.items(section):
            if key not in known:
                raise DataFormatError(f"{path}: unknown config key {key!r} in [{section}]")
            values[key] = _coerce(key, text)
    if overrides:
        values.update(overrides)
    return RunConfig(**values)


def apply_overrides(config: RunConfig, overrides: dict) -> RunConfig:
    return dataclasses.replace(config, **overrides) if overrides else config


# -- manifests and reports ---------------------------------------------------


def write_manifest(out_dir, command: str, config: RunConfig, inputs: dict | None = None, extra: dict | None = None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "artifact_version": __version__,
        "command": command,
        "config_hash": config.content_hash(),
        "seed": config.seed,
        "config": dataclasses.asdict(config),
        "inputs": inputs or {},
    }
    if extra:
        manifest.update(extra)
    # tuples serialize as lists; keep keys sorted so bytes are reproducible
    text = json.dumps(manifest, sort_keys=True, indent=2, default=list)
    (out_dir / "manifest.json").write_text(text + "\n", encoding="utf-8")
    save_config(config, out_dir / "config.ini")


def report_to_json(report: EvalReport) -> str:
    payload = {
        "model": report.model,
        "conditions": {k: list(v) for k, v in report.conditions.items()},
        "rce50": report.rce50,
        "rce70": report.rce70,
        "mrce": report.mrce,
        "pose_sweep": [list(r) for r in report.pose_rows],
        "metadata": report.metadata,
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def report_from_json(text: str) -> EvalReport:
    d = json.loads(text)
    return EvalReport(
        model=d["model"],
        conditions={k: tuple(v) for k, v in d["conditions"].items()},
        rce50=d["rce50"],
        rce70=d["rce70"],
        mrce=d["mrce"],
        pose_rows=[tuple(r) for r in d["pose_sweep"]],
        metadata=d.get("metadata", {}),
    )


def report_to_csv(report: EvalReport) -> str:
    lines = ["condition,ap50,ap70"]
    for name, (a50, a70) in report.conditions.items():
        lines.append(f"{name},{a50:.6f},{a70:.6f}")
    fmt = lambda v: "" if v is None else f"{v:.6f}"
    lines.append(f"RCE@0.5,{fmt(report.rce50)},")
    lines.append(f"RCE@0.7,{fmt(report.rce70)},")
    lines.append(f"mRCE,{fmt(report.mrce)},")
    return "\n".join(lines) + "\n"


def pose_sweep_to_csv(rows) -> str:
    lines = ["sigma_loc,sigma_head,ap50,ap70"]
    for sl, sh, a50, a70 in rows:
        lines.append(f"{sl},{sh},{a50:.6f},{a70:.6f}")
    return "\n".join(lines) + "\n"


def loss_history_to_csv(history: list[dict]) -> str:
    if not history:
        return "step\n"
    keys = ["epoch", "step"] + [k for k in history[0] if k not in ("epoch", "step")]
    lines = [",".join(keys)]
    for row in history:
        lines.append(",".join(f"{row[k]:.8g}" if isinstance(row[k], float) else str(row[k]) for k in keys))
    return "\n".join(lines) + "\n"


def detections_to_csv(rows: list[tuple]) -> str:
    """rows: (scene_id, BoxBEV) pairs."""
    lines = ["scene_id,cx,cy,w,l,yaw,score"]
    for scene_id, b in rows:
        lines.append(f"{scene_id},{b.cx:.6f},{b.cy:.6f},{b.w:.6f},{b.l:.6f},{b.yaw:.6f},{b.score:.6f}")
    return "\n".join(lines) + "\n"


def merged_report_csv(reports: list[EvalReport]) -> str:
    """One row per report, AP columns per condition, robustness summary last."""
    conditions = list(reports[0].conditions.keys())
    for r in reports[1:]:
        if list(r.conditions.keys()) != conditions:
            raise InvalidArgumentError("reports cover different condition sets")
    head = ["model"] + [f"{c}_ap50" for c in conditions] + [f"{c}_ap70" for c in conditions] + ["rce50", "rce70", "mrce"]
    lines = [",".join(head)]
    for r in reports:
        vals = [r.model]
        vals += [f"{r.conditions[c][0]:.6f}" for c in conditions]
        vals += [f"{r.conditions[c][1]:.6f}" for c in conditions]
        vals += ["" if v is None else f"{v:.6f}" for v in (r.rce50, r.rce70, r.mrce)]
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


def scene_svg(scene: Scene, detections: list[BoxBEV], size: int = 640) -> str:
    """Simple overhead scatter: points in grey, truth in green, detections in
    red (opacity tracks score)."""
    x0, x1, y0, y1 = scene.config.extent
    sx = size / (x1 - x0)
    sy = size / (y1 - y0)

    def to_px(x, y):
        return (x - x0) * sx, (y1 - y) * sy

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}" style="background:#fff">'
    ]
    ego_pose = scene.agents[0][0]
    from .scene import transform_to_ego

    for pose, cloud in scene.agents:
        pts = transform_to_ego(cloud, pose, ego_pose).xyz[::7]
        for px, py in (to_px(x, y) for x, y, _ in pts):
            if 0 <= px <= size and 0 <= py <= size:
                parts.append(f'<circle cx="{px:.1f}" cy="{py:.1f}" r="1" fill="#bbb"/>')

    def poly(box, color, opacity):
        pts = " ".join(f"{px:.1f},{py:.1f}" for px, py in (to_px(x, y) for x, y in box.corners()))
        parts.append(f'<polygon points="{pts}" fill="none" stroke="{color}" stroke-opacity="{opacity:.2f}" stroke-width="2"/>')

    for b in scene.gt_boxes:
        poly(b, "#1a7f37", 1.0)
    for b in detections:
        poly(b, "#d0342c", max(0.35, min(1.0, b.score)))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
