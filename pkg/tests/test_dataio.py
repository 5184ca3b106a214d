"""Dataset/config/report file formats."""

import dataclasses
import json

import numpy as np
import pytest

from dkd.dataio import (
    DATASET_MAGIC,
    config_to_text,
    load_config,
    loss_history_to_csv,
    merged_report_csv,
    pose_sweep_to_csv,
    read_dataset,
    report_from_json,
    report_to_csv,
    report_to_json,
    save_config,
    scene_svg,
    write_dataset,
    write_manifest,
)
from dkd.errors import DataFormatError
from dkd.pipeline import EvalReport, RunConfig, build_dataset

TINY = RunConfig(scenes_train=2, num_agents=2, num_objects=3, num_beams=8, points_per_beam=40)


def test_dataset_roundtrip(tmp_path):
    scenes = build_dataset(TINY, "train")
    f = tmp_path / "d.dkds"
    write_dataset(scenes, f)
    assert f.read_bytes()[:4] == DATASET_MAGIC
    back = read_dataset(f)
    assert len(back) == len(scenes)
    for a, b in zip(scenes, back):
        assert a.seed == b.seed
        assert len(a.gt_boxes) == len(b.gt_boxes)
        for pa, pb in zip(a.agents, b.agents):
            assert (pa[0].x, pa[0].y, pa[0].yaw) == (pb[0].x, pb[0].y, pb[0].yaw)
            assert pa[1].xyz.tobytes() == pb[1].xyz.tobytes()
            assert pa[1].beam_id.tobytes() == pb[1].beam_id.tobytes()
            assert pa[1].surface.tobytes() == pb[1].surface.tobytes()
        for ba, bb in zip(a.gt_boxes, b.gt_boxes):
            assert (ba.cx, ba.cy, ba.w, ba.l, ba.yaw) == (bb.cx, bb.cy, bb.w, bb.l, bb.yaw)


def test_dataset_write_is_byte_deterministic(tmp_path):
    scenes = build_dataset(TINY, "train")
    f1, f2 = tmp_path / "a.dkds", tmp_path / "b.dkds"
    write_dataset(scenes, f1)
    write_dataset(scenes, f2)
    assert f1.read_bytes() == f2.read_bytes()


def test_dataset_bad_magic(tmp_path):
    f = tmp_path / "x.dkds"
    f.write_bytes(b"NOPE" + bytes(64))
    with pytest.raises(DataFormatError):
        read_dataset(f)


def test_dataset_truncated(tmp_path):
    scenes = build_dataset(TINY, "train")
    f = tmp_path / "t.dkds"
    write_dataset(scenes, f)
    f.write_bytes(f.read_bytes()[:100])
    with pytest.raises(DataFormatError):
        read_dataset(f)


def test_config_roundtrip(tmp_path):
    cfg = dataclasses.replace(
        RunConfig(), severity=0.75, corruptions=("fog", "echo"), pose_sweep=((0.0, 0.0), (0.3, 0.2)),
        use_agf=False, epochs=7,
    )
    f = tmp_path / "run.ini"
    save_config(cfg, f)
    back = load_config(f)
    assert back == cfg


def test_config_overrides_win(tmp_path):
    f = tmp_path / "run.ini"
    save_config(RunConfig(), f)
    cfg = load_config(f, {"epochs": 3, "use_pkd": False})
    assert cfg.epochs == 3 and not cfg.use_pkd


def test_config_unknown_key(tmp_path):
    f = tmp_path / "run.ini"
    f.write_text("[train]\nwarp_speed = 9\n", encoding="utf-8")
    with pytest.raises(DataFormatError):
        load_config(f)


def sample_report():
    return EvalReport(
        model="student",
        conditions={"clean": (0.8, 0.6), "fog": (0.5, 0.3)},
        rce50=0.375,
        rce70=0.5,
        mrce=0.4375,
        pose_rows=[(0.0, 0.0, 0.8, 0.6), (0.4, 0.4, 0.5, 0.2)],
        metadata={"config_hash": "abc", "seed": 0},
    )


def test_report_json_roundtrip():
    rep = sample_report()
    back = report_from_json(report_to_json(rep))
    assert back == rep


def test_report_csv_contains_summary():
    text = report_to_csv(sample_report())
    assert "clean,0.800000,0.600000" in text
    assert "mRCE,0.437500" in text


def test_merged_report_csv():
    text = merged_report_csv([sample_report(), sample_report()])
    lines = text.strip().splitlines()
    assert lines[0].startswith("model,clean_ap50,fog_ap50")
    assert len(lines) == 3


def test_pose_and_loss_csv():
    assert pose_sweep_to_csv([(0.0, 0.0, 0.5, 0.4)]).splitlines()[1] == "0.0,0.0,0.500000,0.400000"
    hist = [{"epoch": 0, "step": 0, "l_final": 1.25}]
    assert loss_history_to_csv(hist).splitlines()[1] == "0,0,1.25"


def test_manifest_deterministic(tmp_path):
    cfg = RunConfig()
    write_manifest(tmp_path / "a", "eval", cfg, inputs={"x": "1"})
    write_manifest(tmp_path / "b", "eval", cfg, inputs={"x": "1"})
    ma = (tmp_path / "a" / "manifest.json").read_bytes()
    mb = (tmp_path / "b" / "manifest.json").read_bytes()
    assert ma == mb
    parsed = json.loads(ma)
    assert parsed["config_hash"] == cfg.content_hash()
    assert (tmp_path / "a" / "config.ini").exists()


def test_scene_svg_renders_boxes():
    scenes = build_dataset(TINY, "train")
    from dkd.geometry import BoxBEV

    svg = scene_svg(scenes[0], [BoxBEV(1.0, 2.0, 2.0, 4.0, 0.3, 0.9)])
    assert svg.startswith("<svg")
    assert svg.count("<polygon") == len(scenes[0].gt_boxes) + 1
