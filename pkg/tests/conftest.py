import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from flowbench import io, synth
from flowbench.core import BACKGROUND, FlowField, PointMeta

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

SMALL_SENSOR = synth.SensorConfig(beam_count=16, elevation_min=-20.0, elevation_max=5.0, azimuth_steps=360)


def random_meta(rng: np.random.Generator, n: int, ground_frac: float = 0.1, bg_dynamic_frac: float = 0.02):
    """Synthetic per-point ground truth spread over every class, bucket and range."""
    cls = rng.integers(-1, 4, size=n)
    # speeds spanning the static, lowest and upper buckets
    kind = rng.integers(0, 5, size=n)
    speed = np.select(
        [kind == 0, kind == 1, kind == 2, kind == 3],
        [np.zeros(n), rng.uniform(0, 0.5, n), rng.uniform(0.5, 2.0, n), rng.uniform(2.0, 4.0, n)],
        rng.uniform(0, 0.06, n),
    )
    bg = cls == BACKGROUND
    speed[bg] = np.where(rng.random(np.count_nonzero(bg)) < bg_dynamic_frac, rng.uniform(0.05, 1.0, np.count_nonzero(bg)), 0.0)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    flow = d * speed[:, None]
    meta = PointMeta(
        gt_flow=flow,
        gt_speed=np.linalg.norm(flow, axis=1),
        coarse_class=cls,
        instance=np.where(bg, -1, 0),
        instance_ids=("obj",),
        is_ground=rng.random(n) < ground_frac,
        range_m=rng.uniform(0, 130, n),
    )
    return meta


def random_case(seed: int, n: int = 400, invalid_frac: float = 0.05):
    """(pred, gt, meta, pred_class) with noisy predictions and a few invalid points."""
    rng = np.random.default_rng(seed)
    meta = random_meta(rng, n)
    gt = FlowField(meta.gt_flow, rng.random(n) >= invalid_frac)
    pred = FlowField(meta.gt_flow + rng.normal(scale=0.1, size=(n, 3)), rng.random(n) >= invalid_frac)
    pred_class = rng.integers(0, 4, size=n)
    return pred, gt, meta, pred_class


def write_dataset(root, dataset_id: str = "synth-t", n_seq: int = 2, frames: int = 3, seed: int = 0, annotation_every: int = 1, frame_hz: float = 10.0, sensor=SMALL_SENSOR):
    """Write a small unified-format dataset of random scenes; returns the root path."""
    for i in range(n_seq):
        cfg = synth.random_scene_config(seed * 100 + i, n_objects=3, duration_frames=frames, frame_hz=frame_hz)
        seq = synth.synth_sequence(cfg, sensor, dataset_id, f"seq{i:03d}", annotation_every=annotation_every)
        io.write_sequence(root, seq)
    io.write_dataset_meta(root, dataset_id, frame_hz, frame_hz / annotation_every)
    return root


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def cube_pair(noise: float = 0.0, seed: int = 7, linefit: bool = True):
    """(pair with ground truth, ground_first, ground_second) for the single-cube scene.

    Ground masks come from the line-fit segmenter, or from the simulator's hit
    provenance when ``linefit`` is False.
    """
    from flowbench import groundseg, unify

    cfg, sensor = synth.cube_fixture(noise=noise, seed=seed)
    seq, states = synth.synth_sequence(cfg, sensor, return_states=True)
    pair = unify.pair_annotated_frames(seq)[0]
    if linefit:
        g1, g2 = groundseg.segment_ground(pair.first), groundseg.segment_ground(pair.second)
    else:
        g1, g2 = (synth.simulate_lidar(s, sensor, cfg.seed, return_hits=True)[1] == synth.HIT_GROUND for s in states[:2])
    return pair.with_ground_truth(g1), g1, g2
