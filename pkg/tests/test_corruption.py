"""Corruption operator semantics and invariants."""

import numpy as np
import pytest

from dkd.corruption import CORRUPTION_KINDS, apply_corruption
from dkd.errors import InvalidArgumentError
from dkd.scene import SURFACE_GROUND, SURFACE_OBJECT, SceneConfig, generate_scene


@pytest.fixture(scope="module")
def cloud():
    cfg = SceneConfig(num_agents=1, num_objects=6, num_beams=16)
    return generate_scene(cfg, seed=77).agents[0][1]


def clouds_equal(a, b) -> bool:
    return (
        a.xyz.tobytes() == b.xyz.tobytes()
        and a.intensity.tobytes() == b.intensity.tobytes()
        and a.beam_id.tobytes() == b.beam_id.tobytes()
        and a.range_m.tobytes() == b.range_m.tobytes()
        and a.surface.tobytes() == b.surface.tobytes()
    )


@pytest.mark.parametrize("kind", CORRUPTION_KINDS)
def test_severity_zero_is_identity(cloud, kind):
    out = apply_corruption(cloud, kind, 0.0, seed=3)
    assert clouds_equal(out, cloud)


@pytest.mark.parametrize("kind", CORRUPTION_KINDS)
def test_deterministic_per_seed(cloud, kind):
    a = apply_corruption(cloud, kind, 0.7, seed=11)
    b = apply_corruption(cloud, kind, 0.7, seed=11)
    assert clouds_equal(a, b)


def test_unknown_kind_rejected(cloud):
    with pytest.raises(InvalidArgumentError):
        apply_corruption(cloud, "rain", 0.5, seed=1)


def test_severity_out_of_range(cloud):
    with pytest.raises(InvalidArgumentError):
        apply_corruption(cloud, "fog", 1.5, seed=1)


def test_beam_missing_half_of_64_beams():
    cfg = SceneConfig(num_agents=1, num_objects=4, num_beams=64, points_per_beam=90)
    c = generate_scene(cfg, seed=5).agents[0][1]
    assert len(np.unique(c.beam_id)) == 64
    out = apply_corruption(c, "beam_missing", 0.5, seed=9)
    assert len(np.unique(out.beam_id)) == 32


def test_cross_sensor_keeps_every_kth_beam(cloud):
    out = apply_corruption(cloud, "cross_sensor", 1.0, seed=2)
    assert np.all(out.beam_id % 4 == 0)


def test_water_drop_rate_binomial():
    cfg = SceneConfig(num_agents=1, num_objects=3)
    c = generate_scene(cfg, seed=21).agents[0][1]
    n_ground = int((c.surface == SURFACE_GROUND).sum())
    assert n_ground > 200
    kept = []
    for s in range(100):
        out = apply_corruption(c, "water", 1.0, seed=s)
        kept.append(int((out.surface == SURFACE_GROUND).sum()))
    removed_rate = 1.0 - np.mean(kept) / n_ground
    # binomial(0.8): mean over 100 trials is tight around 0.8
    se = np.sqrt(0.8 * 0.2 / (n_ground * 100))
    assert abs(removed_rate - 0.8) < 5 * se + 0.005


def test_echo_drops_only_object_points(cloud):
    out = apply_corruption(cloud, "echo", 1.0, seed=4)
    assert (out.surface == SURFACE_GROUND).sum() == (cloud.surface == SURFACE_GROUND).sum()
    assert (out.surface == SURFACE_OBJECT).sum() < (cloud.surface == SURFACE_OBJECT).sum()


def test_fog_adds_bounded_clutter_and_prefers_far_drops(cloud):
    out = apply_corruption(cloud, "fog", 1.0, seed=6)
    n_clutter = int(1.0 * 0.02 * len(cloud))
    assert len(out) <= len(cloud) + n_clutter
    new = out.range_m[out.surface == 2]
    assert np.all(new <= 10.0 + 1e-9)


def test_cross_talk_replaces_fixed_fraction(cloud):
    out = apply_corruption(cloud, "cross_talk", 1.0, seed=8)
    assert len(out) == len(cloud)
    changed = np.any(out.xyz != cloud.xyz, axis=1)
    assert changed.sum() == int(0.1 * len(cloud))
    # replaced points keep the range invariant
    sensor = np.array([0.0, 0.0, cloud.sensor_height])
    d = np.linalg.norm(out.xyz[changed] - sensor, axis=1)
    np.testing.assert_allclose(d, out.range_m[changed], atol=1e-9)


@pytest.mark.parametrize("kind", ["beam_missing", "cross_sensor", "water", "echo"])
def test_drop_kinds_never_mutate_survivors(cloud, kind):
    out = apply_corruption(cloud, kind, 0.6, seed=13)
    assert len(out) <= len(cloud)
    # every surviving point appears verbatim in the source
    src = {tuple(p) for p in cloud.xyz}
    assert all(tuple(p) in src for p in out.xyz)


def test_motion_blur_jitters_all_points(cloud):
    out = apply_corruption(cloud, "motion_blur", 0.5, seed=14)
    assert len(out) == len(cloud)
    delta = out.xyz - cloud.xyz
    assert np.all(np.abs(delta) > 0)
    assert abs(delta.std() - 0.15) / 0.15 < 0.1
