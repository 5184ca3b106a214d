"""Command-line front end.

Subcommands: gen-data, corrupt, train-teacher, train-student, eval, report.
Exit codes: 0 success, 2 usage error, 3 data/IO error, 4 numeric failure.
Every run writes a manifest next to its outputs; DKD_THREADS caps scene-level
parallelism during evaluation (default: all cores).
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .corruption import CORRUPTION_KINDS, apply_corruption
from .dataio import (
    apply_overrides,
    detections_to_csv,
    load_config,
    loss_history_to_csv,
    merged_report_csv,
    pose_sweep_to_csv,
    read_dataset,
    report_from_json,
    report_to_csv,
    report_to_json,
    scene_svg,
    write_dataset,
    write_manifest,
)
from .errors import DataFormatError, DkdError, InvalidArgumentError, NumericError
from .params import ParamSet
from .pipeline import (
    INFERENCER_FACTORIES,
    RunConfig,
    build_dataset,
    evaluate_model,
    train_ego_detector,
    train_student,
    train_teacher,
)
from .rng import derive_seed
from .scene import Scene


def _config_from_args(args, **overrides) -> RunConfig:
    for name in ("seed", "epochs", "severity", "channels"):
        v = getattr(args, name, None)
        if v is not None:
            overrides[name] = v
    if getattr(args, "agents", None) is not None:
        overrides["num_agents"] = args.agents
    if args.config:
        return load_config(args.config, overrides)
    return apply_overrides(RunConfig(), overrides)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run configuration file (key = value with sections)")
    p.add_argument("--seed", type=int, help="base seed (overrides the config file)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dkd", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic multi-agent dataset")
    _add_common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int, default=None, help="number of scenes (default: config train split)")
    g.add_argument("--agents", type=int, default=None)
    g.add_argument("--split", choices=("train", "eval"), default="train")

    c = sub.add_parser("corrupt", help="rewrite a dataset through one corruption operator")
    _add_common(c)
    c.add_argument("--in", dest="input", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--kind", required=True, choices=CORRUPTION_KINDS)
    c.add_argument("--severity", type=float, required=True)

    tt = sub.add_parser("train-teacher", help="train the holistic-view detector on clean data")
    _add_common(tt)
    tt.add_argument("--data", required=True)
    tt.add_argument("--out", required=True, help="output directory")
    tt.add_argument("--epochs", type=int)
    tt.add_argument("--channels", type=int)
    tt.add_argument("--no-lgm", action="store_true", help="disable the teacher's gated feature enhancement")
    tt.add_argument("--ego-only", action="store_true", help="train on the ego agent's cloud only (baseline detector)")

    ts = sub.add_parser("train-student", help="distill the collaborative student from a trained teacher")
    _add_common(ts)
    ts.add_argument("--data", required=True)
    ts.add_argument("--teacher", required=True, help="teacher parameter file")
    ts.add_argument("--out", required=True)
    ts.add_argument("--epochs", type=int)
    ts.add_argument("--channels", type=int)
    ts.add_argument("--no-pkd", action="store_true", help="disable diffusion restoration and distillation")
    ts.add_argument("--no-agf", action="store_true", help="use unweighted mean fusion")

    ev = sub.add_parser("eval", help="evaluate a model under clean/corrupted conditions")
    _add_common(ev)
    ev.add_argument("--data", required=True)
    ev.add_argument("--params", required=True)
    ev.add_argument("--model", required=True, choices=sorted(INFERENCER_FACTORIES))
    ev.add_argument("--out", required=True)
    ev.add_argument("--severity", type=float)
    ev.add_argument("--corruptions", help="comma list (default: all seven kinds)")
    ev.add_argument("--pose-sweep", action="store_true", help="also run the pose-noise sweep")
    ev.add_argument("--svg", action="store_true", help="write per-scene detection scatter SVGs")
    ev.add_argument("--detections-csv", action="store_true", help="export decoded clean-condition detections")

    rp = sub.add_parser("report", help="merge evaluation reports into summary tables")
    rp.add_argument("--inputs", nargs="+", required=True, help="report.json files")
    rp.add_argument("--out", required=True)
    return ap


def cmd_gen_data(args) -> int:
    config = _config_from_args(args)
    if args.scenes is not None:
        config = dataclasses.replace(config, scenes_train=args.scenes)
    scenes = build_dataset(config, args.split if args.scenes is None else "train")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(scenes, out)
    write_manifest(out.parent, "gen-data", config, extra={"dataset": out.name, "scenes": len(scenes)})
    print(f"wrote {len(scenes)} scenes to {out}")
    return 0


def cmd_corrupt(args) -> int:
    config = _config_from_args(args)
    scenes = read_dataset(args.input)
    out = []
    for scene in scenes:
        agents = []
        for i, (pose, cloud) in enumerate(scene.agents):
            seed = derive_seed(config.seed, scene.seed, "cli_corrupt", args.kind, i)
            agents.append((pose, apply_corruption(cloud, args.kind, args.severity, seed, scene.config.extent)))
        out.append(Scene(agents, scene.gt_boxes, scene.seed, scene.config))
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(out, path)
    write_manifest(
        path.parent, "corrupt", config,
        inputs={"dataset": str(args.input)},
        extra={"kind": args.kind, "severity": args.severity, "dataset": path.name},
    )
    print(f"corrupted {len(out)} scenes ({args.kind} @ {args.severity}) -> {path}")
    return 0


def cmd_train_teacher(args) -> int:
    overrides = {}
    if args.no_lgm:
        overrides["use_lgm_teacher"] = False
    config = _config_from_args(args, **overrides)
    dataset = read_dataset(args.data)
    trainer = train_ego_detector if args.ego_only else train_teacher
    params, history = trainer(dataset, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params.save(out / "teacher.dkdp")
    (out / "loss.csv").write_text(loss_history_to_csv(history), encoding="utf-8")
    write_manifest(
        out, "train-teacher", config,
        inputs={"dataset": str(args.data)},
        extra={"params": "teacher.dkdp", "params_hash": params.content_hash(), "ego_only": bool(args.ego_only)},
    )
    print(f"teacher trained ({len(history)} steps); parameters -> {out / 'teacher.dkdp'}")
    return 0


def cmd_train_student(args) -> int:
    overrides = {}
    if args.no_pkd:
        overrides["use_pkd"] = False
    if args.no_agf:
        overrides["use_agf"] = False
    config = _config_from_args(args, **overrides)
    dataset = read_dataset(args.data)
    teacher = ParamSet.load(args.teacher)
    params, history = train_student(dataset, teacher, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params.save(out / "student.dkdp")
    (out / "loss.csv").write_text(loss_history_to_csv(history), encoding="utf-8")
    write_manifest(
        out, "train-student", config,
        inputs={"dataset": str(args.data), "teacher": str(args.teacher)},
        extra={"params": "student.dkdp", "params_hash": params.content_hash()},
    )
    print(f"student trained ({len(history)} steps); parameters -> {out / 'student.dkdp'}")
    return 0


def cmd_eval(args) -> int:
    overrides = {}
    if args.corruptions:
        kinds = tuple(k.strip() for k in args.corruptions.split(",") if k.strip())
        for k in kinds:
            if k not in CORRUPTION_KINDS:
                raise InvalidArgumentError(f"unknown corruption {k!r}")
        overrides["corruptions"] = kinds
    config = _config_from_args(args, **overrides)
    dataset = read_dataset(args.data)
    params = ParamSet.load(args.params)
    infer = INFERENCER_FACTORIES[args.model](params, config)
    report = evaluate_model(infer, dataset, config, model_name=args.model, with_pose_sweep=args.pose_sweep)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report_to_json(report), encoding="utf-8")
    (out / "report.csv").write_text(report_to_csv(report), encoding="utf-8")
    if report.pose_rows:
        (out / "pose_sweep.csv").write_text(pose_sweep_to_csv(report.pose_rows), encoding="utf-8")
    if args.detections_csv:
        rows = [(i, b) for i, scene in enumerate(dataset) for b in infer(scene)]
        (out / "detections.csv").write_text(detections_to_csv(rows), encoding="utf-8")
    if args.svg:
        svg_dir = out / "svg"
        svg_dir.mkdir(exist_ok=True)
        for i, scene in enumerate(dataset):
            (svg_dir / f"scene_{i:04d}.svg").write_text(scene_svg(scene, infer(scene)), encoding="utf-8")
    write_manifest(
        out, "eval", config,
        inputs={"dataset": str(args.data), "params": str(args.params)},
        extra={"model": args.model},
    )
    clean = report.conditions["clean"]
    mrce = "n/a" if report.mrce is None else f"{report.mrce * 100:.2f}%"
    print(f"{args.model}: clean AP@0.5/0.7 = {clean[0]:.4f}/{clean[1]:.4f}, mRCE = {mrce}")
    return 0


def cmd_report(args) -> int:
    reports = [report_from_json(Path(p).read_text(encoding="utf-8")) for p in args.inputs]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.csv").write_text(merged_report_csv(reports), encoding="utf-8")
    pose = [r for r in reports if r.pose_rows]
    if pose:
        lines = ["model,sigma_loc,sigma_head,ap50,ap70"]
        for r in pose:
            for sl, sh, a50, a70 in r.pose_rows:
                lines.append(f"{r.model},{sl},{sh},{a50:.6f},{a70:.6f}")
        (out / "pose_sweep.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"merged {len(reports)} reports -> {out / 'summary.csv'}")
    return 0


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "corrupt": cmd_corrupt,
    "train-teacher": cmd_train_teacher,
    "train-student": cmd_train_student,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except (DataFormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (InvalidArgumentError, DkdError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
