"""Scene generation, alignment, and pose noise."""

import math

import numpy as np
import pytest

from dkd.errors import InvalidArgumentError
from dkd.geometry import BoxBEV, PoseSE2
from dkd.scene import (
    SURFACE_GROUND,
    SURFACE_OBJECT,
    PointCloud,
    Scene,
    SceneConfig,
    generate_scene,
    inject_pose_noise,
    simulate_cloud,
    transform_to_ego,
)

CFG = SceneConfig(num_agents=2, num_objects=5)


def scene_bytes(s: Scene) -> bytes:
    chunks = []
    for pose, cloud in s.agents:
        chunks.append(np.array([pose.x, pose.y, pose.yaw]).tobytes())
        chunks.append(cloud.xyz.tobytes())
        chunks.append(cloud.intensity.tobytes())
        chunks.append(cloud.beam_id.tobytes())
        chunks.append(cloud.range_m.tobytes())
        chunks.append(cloud.surface.tobytes())
    for b in s.gt_boxes:
        chunks.append(np.array([b.cx, b.cy, b.w, b.l, b.yaw]).tobytes())
    return b"".join(chunks)


def test_zero_objects_gives_ground_only():
    s = generate_scene(SceneConfig(num_agents=2, num_objects=0), seed=3)
    assert s.gt_boxes == []
    for _, cloud in s.agents:
        assert len(cloud) > 0
        assert np.all(cloud.surface == SURFACE_GROUND)


def test_determinism():
    a = generate_scene(CFG, seed=42)
    b = generate_scene(CFG, seed=42)
    assert scene_bytes(a) == scene_bytes(b)
    c = generate_scene(CFG, seed=43)
    assert scene_bytes(a) != scene_bytes(c)


def test_zero_agents_rejected():
    with pytest.raises(InvalidArgumentError):
        generate_scene(SceneConfig(num_agents=0), seed=1)


def test_every_object_has_evidence():
    for seed in range(5):
        s = generate_scene(SceneConfig(num_agents=3, num_objects=10), seed=seed)
        for box in s.gt_boxes:
            found = False
            for pose, cloud in s.agents:
                pts = pose.apply(cloud.xyz[cloud.surface == SURFACE_OBJECT][:, :2])
                c, si = math.cos(box.yaw), math.sin(box.yaw)
                q = (pts - [box.cx, box.cy]) @ np.array([[c, -si], [si, c]])
                hit = (np.abs(q[:, 0]) <= box.l / 2 + 0.3) & (np.abs(q[:, 1]) <= box.w / 2 + 0.3)
                if hit.any():
                    found = True
                    break
            assert found, f"object at ({box.cx:.1f},{box.cy:.1f}) produced no points"


def test_range_invariant_and_beam_ids():
    s = generate_scene(CFG, seed=9)
    for _, cloud in s.agents:
        sensor = np.array([0.0, 0.0, cloud.sensor_height])
        d = np.linalg.norm(cloud.xyz - sensor, axis=1)
        np.testing.assert_allclose(d, cloud.range_m, atol=1e-9)
        assert cloud.beam_id.min() >= 0
        assert cloud.beam_id.max() < cloud.num_beams
        assert np.all(cloud.range_m <= CFG.max_range + 1e-9)


def visible_objects(pose: PoseSE2, boxes, heights, cfg, seed, idx) -> set:
    _, owner = simulate_cloud(pose, boxes, heights, cfg, seed, idx)
    return set(int(o) for o in owner[owner >= 0])


def test_occlusion_collaboration_premise():
    # a wall between the ego and a target: ego is blind, the flanking agent is not
    cfg = SceneConfig(num_agents=2, num_objects=0)
    wall = BoxBEV(8.0, 0.0, 7.0, 7.0, 0.0)  # broad occluder
    target = BoxBEV(16.0, 0.0, 2.0, 4.0, 0.0)
    boxes = [wall, target]
    heights = [2.8, 1.6]
    ego = PoseSE2(0.0, 0.0, 0.0)
    flank = PoseSE2(24.0, 0.0, math.pi)
    ego_vis = visible_objects(ego, boxes, heights, cfg, 5, 0)
    flank_vis = visible_objects(flank, boxes, heights, cfg, 5, 1)
    assert 1 not in ego_vis, "occluded object should be invisible to the ego"
    assert 1 in flank_vis
    assert len(ego_vis | flank_vis) > len(ego_vis)


class TestTransformToEgo:
    def test_identity(self):
        s = generate_scene(CFG, seed=1)
        pose, cloud = s.agents[0]
        out = transform_to_ego(cloud, pose, pose)
        np.testing.assert_allclose(out.xyz, cloud.xyz, atol=1e-12)

    def test_quarter_turn(self):
        cloud = PointCloud(
            np.array([[1.0, 0.0, 0.3]]),
            np.array([0.5]),
            np.array([2], dtype=np.int32),
            np.array([1.0]),
            np.array([SURFACE_OBJECT], dtype=np.uint8),
            4,
            1.7,
        )
        out = transform_to_ego(cloud, PoseSE2(0, 0, math.pi / 2), PoseSE2(0, 0, 0.0))
        np.testing.assert_allclose(out.xyz[0], [0.0, 1.0, 0.3], atol=1e-12)
        assert out.beam_id[0] == 2 and out.range_m[0] == 1.0

    def test_roundtrip(self):
        s = generate_scene(CFG, seed=7)
        src, cloud = s.agents[1]
        ego = s.agents[0][0]
        back = transform_to_ego(transform_to_ego(cloud, src, ego), ego, src)
        np.testing.assert_allclose(back.xyz, cloud.xyz, atol=1e-12)

    def test_preserves_pairwise_distances(self):
        s = generate_scene(CFG, seed=11)
        src, cloud = s.agents[1]
        out = transform_to_ego(cloud, src, s.agents[0][0])
        sub = slice(0, 40)
        d0 = np.linalg.norm(cloud.xyz[sub, None] - cloud.xyz[None, sub], axis=-1)
        d1 = np.linalg.norm(out.xyz[sub, None] - out.xyz[None, sub], axis=-1)
        np.testing.assert_allclose(d0, d1, atol=1e-12)


class TestPoseNoise:
    def test_zero_sigma_identity(self):
        p = PoseSE2(1.0, -2.0, 0.7)
        q = inject_pose_noise(p, 0.0, 0.0, seed=3)
        assert (q.x, q.y, q.yaw) == (p.x, p.y, p.yaw)

    def test_negative_sigma_rejected(self):
        with pytest.raises(InvalidArgumentError):
            inject_pose_noise(PoseSE2(0, 0, 0), -0.1, 0.0, seed=1)

    def test_deterministic(self):
        p = PoseSE2(0.0, 0.0, 0.0)
        a = inject_pose_noise(p, 0.2, 0.1, seed=5)
        b = inject_pose_noise(p, 0.2, 0.1, seed=5)
        assert (a.x, a.y, a.yaw) == (b.x, b.y, b.yaw)

    def test_sample_std_matches_sigma(self):
        sigma = 0.25
        xs = np.array(
            [inject_pose_noise(PoseSE2(0, 0, 0), sigma, 0.0, seed=s).x for s in range(10_000)]
        )
        assert abs(xs.std() - sigma) / sigma < 0.05

    def test_yaw_rewrapped(self):
        p = PoseSE2(0, 0, 3.1)
        q = inject_pose_noise(p, 0.0, 2.0, seed=8)
        assert -math.pi < q.yaw <= math.pi
