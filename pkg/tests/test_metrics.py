import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowbench import metrics
from flowbench.core import FlowField, PointMeta
from flowbench.errors import ConfigMismatch, InvalidConfig, InvalidSpeed, ShapeError
from flowbench.metrics import MetricConfig, SpeedBuckets, evaluate_pair, speed_bucket_of

from conftest import random_case, random_meta
from oracles import compare, oracle_report


def _meta(speed, cls, ground=None, rng_m=None):
    speed = np.asarray(speed, dtype=float)
    n = len(speed)
    flow = np.zeros((n, 3))
    flow[:, 0] = speed
    return PointMeta(
        flow,
        speed,
        cls,
        np.zeros(n),
        ("a",),
        np.zeros(n, bool) if ground is None else ground,
        np.full(n, 10.0) if rng_m is None else rng_m,
    )


def _zero(n):
    return FlowField(np.zeros((n, 3)), np.ones(n, bool))


@pytest.mark.parametrize("seed", range(25))
@pytest.mark.parametrize("aggregation", ["per_class", "pooled"])
def test_matches_oracle(seed, aggregation):
    pred, gt, meta, pc = random_case(seed)
    rep = evaluate_pair(pred, gt, meta, MetricConfig(aggregation=aggregation), pred_class=pc)
    assert compare(rep, oracle_report(pred, gt, meta, aggregation=aggregation, pred_class=pc)) == []


def test_zero_predictor_normalized_is_one():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        meta = random_meta(rng, 500)
        gt = FlowField(meta.gt_flow, np.ones(500, bool))
        rep = evaluate_pair(_zero(500), gt, meta)
        for row in rep.bucket_table().values():
            if "normalized_epe" in row:
                assert row["normalized_epe"] == pytest.approx(1.0, abs=1e-12)
        assert rep.dynamic_mean == pytest.approx(1.0, abs=1e-12)


def test_half_gt_prediction_gives_half():
    meta = _meta([1.0, 1.5, 3.0, 0.7], [0, 0, 2, 3])
    gt = FlowField(meta.gt_flow, np.ones(4, bool))
    rep = evaluate_pair(FlowField(0.5 * meta.gt_flow, gt.valid), gt, meta)
    assert rep.dynamic_mean == pytest.approx(0.5, abs=1e-12)


def test_constant_error_ten_cm():
    rng = np.random.default_rng(0)
    meta = random_meta(rng, 300, ground_frac=0.0)
    gt = FlowField(meta.gt_flow, np.ones(300, bool))
    off = np.zeros((300, 3))
    off[:, 1] = 0.10
    rep = evaluate_pair(FlowField(meta.gt_flow + off, gt.valid), gt, meta)
    tw = rep.threeway_cm()
    for k in ("FD", "FS", "BS", "mean"):
        assert tw[k] == pytest.approx(10.0, abs=1e-9)


@pytest.mark.parametrize(
    "speed,bucket", [(0.0, 0), (0.49999, 0), (0.5, 1), (0.7, 1), (1.0, 2), (2.0, 3), (3.2, 3), (1e9, 3)]
)
def test_bucket_boundaries(speed, bucket):
    assert speed_bucket_of(speed) == bucket


def test_invalid_speed():
    for bad in (-0.1, float("nan")):
        with pytest.raises(InvalidSpeed):
            speed_bucket_of(bad)
    with pytest.raises(InvalidSpeed):
        speed_bucket_of(5.0, SpeedBuckets((0.0, 1.0, 2.0)))


def test_bucket_config_validation():
    with pytest.raises(InvalidConfig):
        SpeedBuckets((0.0, 1.0, 0.5))
    with pytest.raises(InvalidConfig):
        SpeedBuckets((0.1, 1.0))
    with pytest.raises(InvalidConfig):
        SpeedBuckets((0.0, 0.04, 1.0))
    with pytest.raises(InvalidConfig):
        MetricConfig(aggregation="median")


def test_static_bucket_has_no_normalized_value():
    # mean speed below the dynamic threshold: the cell reports raw EPE only
    meta = _meta([0.01, 0.02], [0, 0])
    gt = FlowField(meta.gt_flow, np.ones(2, bool))
    rep = evaluate_pair(_zero(2), gt, meta)
    (row,) = rep.bucket_table().values()
    assert "normalized_epe" not in row and row["raw_epe_m"] == pytest.approx(0.015)
    assert rep.dynamic_mean is None


def test_exclusions():
    # ground, background-dynamic and invalid points never contribute
    meta = _meta([1.0, 1.0, 0.0, 1.0], [0, -1, -1, 0], ground=np.array([False, False, False, True]))
    gt = FlowField(meta.gt_flow, np.array([True, True, True, True]))
    pred = FlowField(np.zeros((4, 3)), np.array([True, True, True, True]))
    rep = evaluate_pair(pred, gt, meta)
    assert rep.counts["evaluated"] == 2
    assert rep.counts["background_dynamic"] == 1 and rep.counts["ground"] == 1
    assert rep.threeway_cm() == {"FD": 100.0, "BS": 0.0, "mean": 50.0}


def test_semantic_example():
    sem = metrics.semantic_metrics([0, 0, 1, 1], [0, 0, 0, 0])
    assert sem["accuracy"] == 0.5 and sem["per_class_iou"] == {"CAR": 0.5} and sem["miou"] == 0.5
    perfect = metrics.semantic_metrics([0, 1, 2, 3], [0, 1, 2, 3])
    assert perfect["miou"] == 1.0
    with pytest.raises(ShapeError):
        metrics.semantic_metrics([0, 1], [0])
    with pytest.raises(ShapeError):
        metrics.semantic_metrics([7], [0])


@pytest.fixture(scope="module")
def pair_reports():
    out = []
    for seed in range(100):
        pred, gt, meta, pc = random_case(seed, n=120)
        out.append(evaluate_pair(pred, gt, meta, pred_class=pc))
    return out


@settings(max_examples=30)
@given(st.permutations(range(100)), st.lists(st.integers(1, 99), max_size=9, unique=True))
def test_merge_is_partition_invariant(pair_reports, order, cuts):
    whole = metrics.aggregate_reports(pair_reports)
    shuffled = [pair_reports[i] for i in order]
    bounds = [0, *sorted(cuts), 100]
    shards = [metrics.aggregate_reports(shuffled[a:b]) for a, b in zip(bounds, bounds[1:])]
    merged = metrics.aggregate_reports(shards)
    assert merged == whole
    assert merged.to_dict() == whole.to_dict()


def test_merge_rules():
    a = evaluate_pair(*random_case(1)[:3])
    b = evaluate_pair(*random_case(2)[:3])
    assert a.merge(b) == b.merge(a)
    assert a.merge(metrics.MetricReport()) == a
    with pytest.raises(ConfigMismatch):
        a.merge(metrics.MetricReport(MetricConfig(aggregation="pooled")))


@settings(max_examples=30)
@given(st.floats(0.1, 10.0))
def test_normalized_scale_equivariant(scale):
    pred, gt, meta, _ = random_case(5)
    thr_meta = PointMeta(meta.gt_flow * scale, meta.gt_speed * scale, meta.coarse_class, meta.instance, meta.instance_ids, meta.is_ground, meta.range_m)
    r1 = evaluate_pair(pred, gt, meta, MetricConfig(SpeedBuckets(dynamic_threshold=0.0)))
    cfg = MetricConfig(SpeedBuckets(tuple(e * scale for e in SpeedBuckets().edges), dynamic_threshold=0.0))
    r2 = evaluate_pair(
        FlowField(pred.vectors * scale, pred.valid), FlowField(gt.vectors * scale, gt.valid), thr_meta, cfg
    )
    assert r2.dynamic_mean == pytest.approx(r1.dynamic_mean, rel=1e-9)


def test_monotone_in_error():
    pred, gt, meta, _ = random_case(8)
    prev = -1.0
    for k in (0.0, 0.5, 1.0, 2.0, 4.0):
        p = FlowField(gt.vectors + k * (pred.vectors - gt.vectors), pred.valid)
        dm = evaluate_pair(p, gt, meta).dynamic_mean
        assert dm >= prev
        prev = dm


def test_report_json_roundtrip_keys():
    pred, gt, meta, pc = random_case(3)
    d = evaluate_pair(pred, gt, meta, pred_class=pc).to_dict()
    assert set(d) == {"config", "counts", "threeway_cm", "bucket_table", "dynamic_mean", "per_class_dynamic", "range_table", "semantic"}
    assert d["config"]["speed_edges"][-1] == "inf"
    assert MetricConfig.from_dict(d["config"]) == MetricConfig()
    assert "Three-way" in evaluate_pair(pred, gt, meta).format_table()


def test_range_table_uses_range_buckets():
    meta = _meta([1.0, 1.0], [0, 0], rng_m=np.array([10.0, 60.0]))
    gt = FlowField(meta.gt_flow, np.ones(2, bool))
    pred = FlowField(np.array([[0.5, 0, 0], [0.0, 0, 0]]), gt.valid)
    rt = metrics.range_bucketed(pred, gt, meta)
    assert rt == {"[0.0, 35.0)": 0.5, "[50.0, 75.0)": 1.0}


def test_velocity_histogram():
    meta = _meta([0.0, 0.04, 0.05, 0.15, 0.19, 1.0], [0, 0, 0, 1, -1, 2])
    h = metrics.velocity_histogram(meta, 0.1)
    assert h.counts.tolist() == [1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 1]
    with pytest.raises(InvalidConfig):
        metrics.velocity_histogram(meta, 0.0)
    assert math.isclose(h.edges[-1], 1.1)
