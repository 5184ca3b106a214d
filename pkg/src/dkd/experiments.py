"""Multi-seed experiment driver: trains every model variant one comparison
needs and collects the directional results (collaboration gain, restoration
gain under corruption, gated-fusion gain, teacher gating gain, pose-noise
robustness)."""

from __future__ import annotations

import time
from dataclasses import replace

import numpy as np

from .pipeline import (
    RunConfig,
    build_dataset,
    evaluate_condition,
    make_student_inferencer,
    make_teacher_inferencer,
    make_no_collab_inferencer,
    train_ego_detector,
    train_student,
    train_teacher,
)


def run_directional_suite(config: RunConfig, seeds, pose_pair=(0.4, 0.4), log=None) -> dict:
    """Train teacher/student variants per seed and measure every quantity the
    directional comparisons use. Returns per-seed rows plus seed means."""
    say = log if log is not None else (lambda *_: None)
    rows = []
    t_start = time.time()
    for seed in seeds:
        cfg = replace(config, seed=seed)
        say(f"[seed {seed}] generating data")
        train = build_dataset(cfg, "train")
        evalset = build_dataset(cfg, "eval")

        say(f"[seed {seed}] training teacher (gated)")
        teacher, _ = train_teacher(train, cfg)
        say(f"[seed {seed}] training teacher (ungated)")
        teacher_plain, _ = train_teacher(train, replace(cfg, use_lgm_teacher=False))
        say(f"[seed {seed}] training ego-only detector")
        ego, _ = train_ego_detector(train, cfg)
        say(f"[seed {seed}] training student (restoration + gated fusion)")
        student_full, _ = train_student(train, teacher, cfg)
        say(f"[seed {seed}] training student (restoration + mean fusion)")
        student_mean, _ = train_student(train, teacher, replace(cfg, use_agf=False))
        say(f"[seed {seed}] training student (plain detection)")
        student_plain, _ = train_student(train, teacher, replace(cfg, use_pkd=False, use_agf=False))

        say(f"[seed {seed}] evaluating")
        r = {"seed": seed}
        full_inf = make_student_inferencer(student_full, cfg)
        mean_inf = make_student_inferencer(student_mean, cfg)
        plain_inf = make_student_inferencer(student_plain, cfg)

        r["full_clean"] = evaluate_condition(full_inf, evalset, cfg, None)
        r["full_pose"] = evaluate_condition(full_inf, evalset, cfg, None, pose_noise=pose_pair)
        r["mean_clean"] = evaluate_condition(mean_inf, evalset, cfg, None)
        r["mean_pose"] = evaluate_condition(mean_inf, evalset, cfg, None, pose_noise=pose_pair)
        r["mean_corr"] = [evaluate_condition(mean_inf, evalset, cfg, k) for k in cfg.corruptions]
        r["plain_clean"] = evaluate_condition(plain_inf, evalset, cfg, None)
        r["plain_corr"] = [evaluate_condition(plain_inf, evalset, cfg, k) for k in cfg.corruptions]
        r["ego_clean"] = evaluate_condition(make_no_collab_inferencer(ego, cfg), evalset, cfg, None)
        r["teacher_gated"] = evaluate_condition(make_teacher_inferencer(teacher, cfg), evalset, cfg, None)
        r["teacher_plain"] = evaluate_condition(make_teacher_inferencer(teacher_plain, cfg), evalset, cfg, None)
        rows.append(r)
        say(f"[seed {seed}] done at {time.time() - t_start:.0f}s: " + summarize_row(r))

    return {"rows": rows, "checks": directional_checks(rows), "elapsed_s": time.time() - t_start}


def summarize_row(r: dict) -> str:
    mc70 = np.mean([c[1] for c in r["mean_corr"]])
    pc70 = np.mean([c[1] for c in r["plain_corr"]])
    return (
        f"full_clean={r['full_clean'][0]:.3f}/{r['full_clean'][1]:.3f} "
        f"mean_clean={r['mean_clean'][0]:.3f}/{r['mean_clean'][1]:.3f} "
        f"plain_clean={r['plain_clean'][0]:.3f}/{r['plain_clean'][1]:.3f} "
        f"ego={r['ego_clean'][0]:.3f}/{r['ego_clean'][1]:.3f} "
        f"corr70 mean/plain={mc70:.3f}/{pc70:.3f} "
        f"teacher={r['teacher_gated'][1]:.3f} vs {r['teacher_plain'][1]:.3f} "
        f"pose70 full={r['full_pose'][1]:.3f} mean={r['mean_pose'][1]:.3f}"
    )


def directional_checks(rows: list[dict]) -> dict:
    """Seed-mean comparisons; each entry is (value, requirement, passed)."""

    def seed_mean(key, idx):
        return float(np.mean([r[key][idx] for r in rows]))

    def seed_mean_corr(key, idx):
        return float(np.mean([[c[idx] for c in r[key]] for r in rows]))

    full50 = seed_mean("full_clean", 0)
    ego50 = seed_mean("ego_clean", 0)
    mean_corr70 = seed_mean_corr("mean_corr", 1)
    plain_corr70 = seed_mean_corr("plain_corr", 1)
    mean50 = seed_mean("mean_clean", 0)
    tg70 = seed_mean("teacher_gated", 1)
    tp70 = seed_mean("teacher_plain", 1)
    full70 = seed_mean("full_clean", 1)
    fullp70 = seed_mean("full_pose", 1)
    meanc70 = seed_mean("mean_clean", 1)
    meanp70 = seed_mean("mean_pose", 1)
    full_fraction = (full70 - fullp70) / full70 if full70 > 0 else float("nan")
    mean_fraction = (meanc70 - meanp70) / meanc70 if meanc70 > 0 else float("nan")

    return {
        "a_collaboration_gain_ap50": {
            "value": full50 - ego50,
            "requirement": ">= 0.05",
            "passed": full50 - ego50 >= 0.05,
        },
        "b_restoration_corrupted_ap70": {
            "value": mean_corr70 - plain_corr70,
            "requirement": "> 0",
            "passed": mean_corr70 > plain_corr70,
        },
        "c_gated_fusion_clean_ap50": {
            "value": full50 - mean50,
            "requirement": "> 0",
            "passed": full50 > mean50,
        },
        "d_teacher_gating_ap70": {
            "value": tg70 - tp70,
            "requirement": ">= 0",
            "passed": tg70 >= tp70,
        },
        "e1_pose_noise_degrades_ap70": {
            "value": fullp70 - full70,
            "requirement": "< 0",
            "passed": fullp70 < full70,
        },
        "e2_gated_degrades_less": {
            "value": mean_fraction - full_fraction,
            "requirement": "> 0",
            "passed": full_fraction < mean_fraction,
        },
    }
