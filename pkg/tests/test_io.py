import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from flowbench import io
from flowbench.core import FlowField, PointCloud, Pose
from flowbench.errors import FormatError, MalformedAnnotations, UnmappedClass
from flowbench.unify import default_taxonomy

f32 = st.floats(-1e4, 1e4, allow_nan=False, width=32)


@given(
    hnp.arrays(np.float32, st.tuples(st.integers(0, 40), st.just(3)), elements=f32),
    st.floats(0, 1e6, allow_nan=False),
    st.floats(-3.2, 3.2),
    st.text(max_size=12),
)
def test_frame_roundtrip_bit_exact(xyz, ts, yaw, ds):
    n = len(xyz)
    rng = np.random.default_rng(n)
    cloud = PointCloud(
        xyz.astype(np.float64),
        rng.integers(0, 64, n),
        rng.random(n).astype(np.float32).astype(np.float64),
        Pose.from_yaw(yaw, (1.5, -2.25, 0.1)),
        7,
        ts,
        64,
        ds,
    )
    back = io.decode_frame(io.encode_frame(cloud))
    assert np.array_equal(back.xyz, cloud.xyz)
    assert np.array_equal(back.beam_id, cloud.beam_id)
    assert np.array_equal(back.t_offset, cloud.t_offset)
    assert back.ego_pose == cloud.ego_pose
    assert (back.frame_index, back.timestamp, back.beam_count, back.dataset_id) == (7, ts, 64, ds)


@given(hnp.arrays(np.float32, st.tuples(st.integers(0, 40), st.just(3)), elements=f32))
def test_flow_roundtrip_bit_exact(vec):
    valid = np.arange(len(vec)) % 3 != 0
    flow = FlowField(vec.astype(np.float64), valid)
    back = io.decode_flow(io.encode_flow(flow))
    assert np.array_equal(back.vectors, flow.vectors) and np.array_equal(back.valid, valid)


def test_truncated_and_corrupt_files():
    flow = FlowField(np.ones((5, 3)), np.ones(5, bool))
    buf = io.encode_flow(flow)
    with pytest.raises(FormatError):
        io.decode_flow(buf[:-1])
    with pytest.raises(FormatError):
        io.decode_flow(b"XXXX" + buf[4:])
    cloud = PointCloud(np.zeros((3, 3)), [0, 1, 2], np.zeros(3), Pose.identity(), 0, 0.0, 4, "d")
    fbuf = io.encode_frame(cloud)
    for cut in (3, 20, len(fbuf) - 1):
        with pytest.raises(FormatError):
            io.decode_frame(fbuf[:cut])


def test_frame_header_layout():
    cloud = PointCloud(np.zeros((2, 3)), [0, 1], np.zeros(2), Pose.identity(), 3, 0.5, 2, "ab")
    buf = io.encode_frame(cloud)
    assert buf[:4] == b"UFLW"
    # header: magic, version u16, count u32, beams u16, id length u16 + bytes, frame u32, t f64, 12 f64
    assert len(buf) == 4 + 2 + 4 + 2 + 2 + 2 + 4 + 8 + 96 + 2 * 18


def test_annotation_schema(tmp_path):
    good = [{"instance_id": "a", "raw_class": "car", "center": [1, 2, 3], "size": [4, 2, 1.5], "yaw": 0.1}]
    path = tmp_path / "a.json"
    path.write_text(json.dumps(good))
    (ann,) = io.read_annotations(path, 0, "synth", default_taxonomy())
    assert ann.coarse_class.name == "CAR"
    path.write_text(json.dumps([{"instance_id": "a", "raw_class": "car", "center": [1, 2], "size": [1, 1, 1], "yaw": 0}]))
    with pytest.raises((FormatError, MalformedAnnotations)):
        io.read_annotations(path, 0, "synth")
    path.write_text(json.dumps([dict(good[0], raw_class="unicorn")]))
    with pytest.raises(UnmappedClass):
        io.read_annotations(path, 0, "synth", default_taxonomy())


def test_write_json_sorted_and_stable(tmp_path):
    io.write_json(tmp_path / "x.json", {"b": 1, "a": [1.5, 2]})
    text = (tmp_path / "x.json").read_text()
    assert text.index('"a"') < text.index('"b"') and text.endswith("\n")
    with pytest.raises(ValueError):
        io.write_json(tmp_path / "y.json", {"a": float("nan")})
