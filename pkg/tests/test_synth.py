import math

import numpy as np
import pytest

from flowbench import synth
from flowbench.core import FramePair, gt_flow_from_annotations
from flowbench.errors import InvalidScene

from conftest import SMALL_SENSOR


def _scene(**kw):
    return synth.SceneConfig(seed=3, duration_frames=3, **kw)


def test_zero_velocity_object_keeps_pose():
    states, anns = synth.generate_scene(_scene(objects=[synth.ObjectSpec("car", 10, 0, yaw=0.2)]))
    assert all(np.array_equal(a[0].box_center, anns[0][0].box_center) for a in anns)
    assert all(a[0].box_yaw == anns[0][0].box_yaw for a in anns)


def test_object_advances_speed_over_rate():
    _, anns = synth.generate_scene(_scene(objects=[synth.ObjectSpec("car", 10, 0, speed=10.0)]))
    step = anns[1][0].box_center - anns[0][0].box_center
    assert np.allclose(step, [1.0, 0.0, 0.0], atol=1e-12)


def test_generate_scene_deterministic():
    cfg = synth.random_scene_config(11, n_objects=4, duration_frames=3)
    _, a1 = synth.generate_scene(cfg)
    _, a2 = synth.generate_scene(cfg)
    for f1, f2 in zip(a1, a2):
        for x, y in zip(f1, f2):
            assert np.array_equal(x.box_center, y.box_center) and x.box_yaw == y.box_yaw


def test_overlapping_boxes_rejected():
    with pytest.raises(InvalidScene):
        synth.generate_scene(_scene(objects=[synth.ObjectSpec("car", 10, 0), synth.ObjectSpec("car", 11, 0)]))


def test_config_validation():
    with pytest.raises(InvalidScene):
        synth.SceneConfig(frame_hz=0)
    with pytest.raises(InvalidScene):
        synth.SceneConfig(objects=[synth.ObjectSpec("car", 0, 0, speed=-1)])
    with pytest.raises(InvalidScene):
        synth.SensorConfig(elevation_min=5, elevation_max=-5)


def test_flat_ground_matches_ray_plane_oracle():
    sensor = synth.SensorConfig(beam_count=32, elevation_min=-25.0, elevation_max=-1.5, azimuth_steps=256)
    states, _ = synth.generate_scene(_scene())
    c = synth.simulate_lidar(states[0], sensor, seed=0)
    assert np.allclose(c.xyz[:, 2], -sensor.mount_height, atol=1e-9)
    elev = sensor.elevations()[c.beam_id]
    expected = sensor.mount_height / np.sin(-elev)
    assert np.allclose(np.linalg.norm(c.xyz, axis=1), expected, rtol=0, atol=1e-9)
    assert c.distinct_beams() <= 32


def test_distinct_beams_equals_downward_beams():
    sensor = synth.SensorConfig(beam_count=64, elevation_min=-25.0, elevation_max=10.0, azimuth_steps=128)
    states, _ = synth.generate_scene(_scene())
    c = synth.simulate_lidar(states[0], sensor, seed=0)
    e = sensor.elevations()
    # a downward beam hits the ground within max_range iff mount_height / sin(-e) <= max_range
    reach = (e < 0) & (sensor.mount_height / np.sin(np.maximum(-e, 1e-12)) <= sensor.max_range)
    assert c.distinct_beams() == int(np.count_nonzero(reach))


def test_simulation_deterministic_and_seeded():
    cfg = synth.random_scene_config(5)
    states, _ = synth.generate_scene(cfg)
    noisy = synth.SensorConfig(beam_count=16, azimuth_steps=360, range_noise_sigma=0.02)
    a = synth.simulate_lidar(states[0], noisy, 1)
    b = synth.simulate_lidar(states[0], noisy, 1)
    c = synth.simulate_lidar(states[0], noisy, 2)
    assert np.array_equal(a.xyz, b.xyz)
    assert not np.array_equal(a.xyz, c.xyz)


@pytest.mark.parametrize("seed", range(100))
def test_oracle_flow_agrees_with_box_flow(seed):
    cfg = synth.random_scene_config(seed, n_objects=4, duration_frames=2, ego_speed=None)
    states, anns = synth.generate_scene(cfg)
    c0, hits = synth.simulate_lidar(states[0], SMALL_SENSOR, cfg.seed, return_hits=True)
    c1 = synth.simulate_lidar(states[1], SMALL_SENSOR, cfg.seed)
    flow, _ = gt_flow_from_annotations(FramePair(c0, c1, anns[0], anns[1], "s"))
    oracle = synth.oracle_flow(states[0], states[1], c0, hits)
    ok = flow.valid & oracle.valid
    assert np.array_equal(flow.valid, oracle.valid)
    assert np.allclose(flow.vectors[ok], oracle.vectors[ok], rtol=0, atol=1e-9)


def test_oracle_flow_recasts_without_hits():
    cfg = synth.random_scene_config(2, duration_frames=2)
    states, _ = synth.generate_scene(cfg)
    c0, hits = synth.simulate_lidar(states[0], SMALL_SENSOR, 0, return_hits=True)
    a = synth.oracle_flow(states[0], states[1], c0, hits)
    b = synth.oracle_flow(states[0], states[1], c0)
    assert np.allclose(a.vectors, b.vectors, atol=1e-9)


def test_static_scene_oracle_is_zero():
    cfg = _scene(objects=[synth.ObjectSpec("car", 10, 0)], ego_speed=3.0)
    states, _ = synth.generate_scene(cfg)
    c0 = synth.simulate_lidar(states[0], SMALL_SENSOR, 0)
    assert np.all(synth.oracle_flow(states[0], states[1], c0).vectors == 0)


def test_translating_object_constant_field():
    cfg = _scene(objects=[synth.ObjectSpec("car", 10, 0, speed=5.0)])
    states, _ = synth.generate_scene(cfg)
    c0, hits = synth.simulate_lidar(states[0], SMALL_SENSOR, 0, return_hits=True)
    f = synth.oracle_flow(states[0], states[1], c0, hits)
    obj = f.vectors[hits == 0]
    assert len(obj) > 0 and np.allclose(obj, [0.5, 0, 0], atol=1e-12)


def test_sloped_objects_rest_on_ground():
    cfg = _scene(objects=[synth.ObjectSpec("car", 20, 0)], ground_slope_deg=5.0)
    states, _ = synth.generate_scene(cfg)
    o = states[0].objects[0]
    assert o.center[2] - o.size[2] / 2 >= synth.ground_height(20 + 2.5, 0, math.radians(5.0)) - 1e-9


def test_synth_sequence_keyframes():
    cfg = synth.random_scene_config(1, duration_frames=6)
    seq = synth.synth_sequence(cfg, SMALL_SENSOR, "synth-x", "s0", annotation_every=3)
    assert seq.annotated == (0, 3)
    assert seq.frame_indices == tuple(range(6))
    assert all(f.dataset_id == "synth-x" for f in seq.frames)
