"""On-disk formats.

Binary, little-endian point and flow payloads; JSON for annotations,
manifests and reports. Dataset directory layout::

    ROOT/dataset.json                      {"dataset_id", "native_hz", "annotation_hz"}
    ROOT/<sequence_id>/sequence.json       {"sequence_id", "annotated_frames": [...]}
    ROOT/<sequence_id>/frames/NNNNNN.uflw
    ROOT/<sequence_id>/annotations/NNNNNN.json
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import jsonschema
import numpy as np

from .core import FlowField, FrameSequence, ObjectAnnotation, PointCloud, Pose
from .errors import FormatError, ShapeError

FRAME_MAGIC = b"UFLW"
FLOW_MAGIC = b"UFLO"
FORMAT_VERSION = 1

FRAME_RECORD = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("beam_id", "<u2"), ("t_offset", "<f4")])
FLOW_RECORD = np.dtype([("fx", "<f4"), ("fy", "<f4"), ("fz", "<f4"), ("valid", "u1")])

_FRAME_HEAD = struct.Struct("<4sHIH")
_FRAME_TAIL = struct.Struct("<Id12d")
_FLOW_HEAD = struct.Struct("<4sHI")

ANNOTATION_SCHEMA = {
    "type": "array",
    "items": {
        "type": "object",
        "required": ["instance_id", "raw_class", "center", "size", "yaw"],
        "properties": {
            "instance_id": {"type": "string"},
            "raw_class": {"type": "string"},
            "center": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
            "size": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 3, "maxItems": 3},
            "yaw": {"type": "number"},
        },
    },
}


def encode_frame(cloud: PointCloud) -> bytes:
    ds = cloud.dataset_id.encode("utf-8")
    if cloud.beam_count > 0xFFFF or len(ds) > 0xFFFF:
        raise FormatError("beam_count or dataset_id too large for the frame header")
    rec = np.empty(len(cloud), dtype=FRAME_RECORD)
    rec["x"], rec["y"], rec["z"] = cloud.xyz[:, 0], cloud.xyz[:, 1], cloud.xyz[:, 2]
    rec["beam_id"] = cloud.beam_id
    rec["t_offset"] = cloud.t_offset
    head = _FRAME_HEAD.pack(FRAME_MAGIC, FORMAT_VERSION, len(cloud), cloud.beam_count)
    tail = _FRAME_TAIL.pack(cloud.frame_index, cloud.timestamp, *cloud.ego_pose.as_row_major_12())
    return head + struct.pack("<H", len(ds)) + ds + tail + rec.tobytes()


def decode_frame(buf: bytes) -> PointCloud:
    try:
        magic, version, count, beams = _FRAME_HEAD.unpack_from(buf, 0)
        if magic != FRAME_MAGIC:
            raise FormatError(f"bad frame magic {magic!r}")
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported frame version {version}")
        off = _FRAME_HEAD.size
        (n_ds,) = struct.unpack_from("<H", buf, off)
        off += 2
        ds = bytes(buf[off : off + n_ds]).decode("utf-8")
        if len(ds.encode("utf-8")) != n_ds:
            raise FormatError("truncated dataset id")
        off += n_ds
        frame_index, timestamp, *pose = _FRAME_TAIL.unpack_from(buf, off)
        off += _FRAME_TAIL.size
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"truncated or corrupt frame header: {exc}") from exc
    payload = len(buf) - off
    if payload != count * FRAME_RECORD.itemsize:
        raise FormatError(f"frame declares {count} points but carries {payload} payload bytes")
    rec = np.frombuffer(buf, dtype=FRAME_RECORD, count=count, offset=off)
    try:
        return PointCloud(
            xyz=np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64),
            beam_id=rec["beam_id"].astype(np.int32),
            t_offset=rec["t_offset"].astype(np.float64),
            ego_pose=Pose.from_matrix(np.array(pose)),
            frame_index=frame_index,
            timestamp=timestamp,
            beam_count=beams,
            dataset_id=ds,
        )
    except ShapeError as exc:
        raise FormatError(str(exc)) from exc


def write_frame(path, cloud: PointCloud) -> None:
    Path(path).write_bytes(encode_frame(cloud))


def read_frame(path) -> PointCloud:
    return decode_frame(Path(path).read_bytes())


def read_frame_header(path) -> dict:
    with open(path, "rb") as fh:
        buf = fh.read(_FRAME_HEAD.size + 2 + 0xFFFF + _FRAME_TAIL.size)
    try:
        magic, version, count, beams = _FRAME_HEAD.unpack_from(buf, 0)
        off = _FRAME_HEAD.size
        (n_ds,) = struct.unpack_from("<H", buf, off)
        ds = buf[off + 2 : off + 2 + n_ds].decode("utf-8")
        frame_index, timestamp, *_ = _FRAME_TAIL.unpack_from(buf, off + 2 + n_ds)
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt frame header") from exc
    if magic != FRAME_MAGIC or version != FORMAT_VERSION:
        raise FormatError(f"{path}: not a version-{FORMAT_VERSION} frame file")
    return {"point_count": count, "beam_count": beams, "dataset_id": ds, "frame_index": frame_index, "timestamp": timestamp}


def encode_flow(flow: FlowField) -> bytes:
    rec = np.empty(len(flow), dtype=FLOW_RECORD)
    rec["fx"], rec["fy"], rec["fz"] = flow.vectors[:, 0], flow.vectors[:, 1], flow.vectors[:, 2]
    rec["valid"] = flow.valid
    return _FLOW_HEAD.pack(FLOW_MAGIC, FORMAT_VERSION, len(flow)) + rec.tobytes()


def decode_flow(buf: bytes) -> FlowField:
    try:
        magic, version, count = _FLOW_HEAD.unpack_from(buf, 0)
    except struct.error as exc:
        raise FormatError("truncated flow header") from exc
    if magic != FLOW_MAGIC:
        raise FormatError(f"bad flow magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported flow version {version}")
    payload = len(buf) - _FLOW_HEAD.size
    if payload != count * FLOW_RECORD.itemsize:
        raise FormatError(f"flow file declares {count} vectors but carries {payload} payload bytes")
    rec = np.frombuffer(buf, dtype=FLOW_RECORD, count=count, offset=_FLOW_HEAD.size)
    if np.any(rec["valid"] > 1):
        raise FormatError("flow valid byte must be 0 or 1")
    vec = np.stack([rec["fx"], rec["fy"], rec["fz"]], axis=1).astype(np.float64)
    valid = rec["valid"].astype(bool)
    if not np.all(np.isfinite(vec[valid])):
        raise FormatError("non-finite flow vector marked valid")
    return FlowField(vec, valid)


def write_flow(path, flow: FlowField) -> None:
    Path(path).write_bytes(encode_flow(flow))


def read_flow(path) -> FlowField:
    return decode_flow(Path(path).read_bytes())


def annotations_to_json(annotations) -> list:
    return [
        {
            "instance_id": a.instance_id,
            "raw_class": a.raw_class,
            "center": [float(v) for v in a.box_center],
            "size": [float(v) for v in a.box_size],
            "yaw": float(a.box_yaw),
        }
        for a in annotations
    ]


def annotations_from_json(records, frame_index: int, dataset_id: str, taxonomy=None) -> tuple[ObjectAnnotation, ...]:
    """Build annotations; ``taxonomy`` (a TaxonomyMap) assigns coarse classes and
    raises UnmappedClass for unknown raw classes."""
    try:
        jsonschema.validate(records, ANNOTATION_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise FormatError(f"annotation schema violation: {exc.message}") from exc
    return tuple(
        ObjectAnnotation(
            instance_id=r["instance_id"],
            raw_class=r["raw_class"],
            coarse_class=None if taxonomy is None else taxonomy.map(dataset_id, r["raw_class"]),
            box_center=r["center"],
            box_size=r["size"],
            box_yaw=r["yaw"],
            frame_index=frame_index,
        )
        for r in records
    )


def write_annotations(path, annotations) -> None:
    Path(path).write_text(json.dumps(annotations_to_json(annotations), sort_keys=True, indent=1))


def read_annotations(path, frame_index: int, dataset_id: str, taxonomy=None):
    try:
        records = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    return annotations_from_json(records, frame_index, dataset_id, taxonomy)


def frame_name(frame_index: int) -> str:
    return f"{frame_index:06d}"


def write_dataset_meta(root, dataset_id: str, native_hz: float, annotation_hz: float) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    meta = {"dataset_id": dataset_id, "native_hz": native_hz, "annotation_hz": annotation_hz}
    (root / "dataset.json").write_text(json.dumps(meta, sort_keys=True, indent=1))


def read_dataset_meta(root) -> dict:
    path = Path(root) / "dataset.json"
    try:
        meta = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    for key in ("dataset_id", "native_hz", "annotation_hz"):
        if key not in meta:
            raise FormatError(f"{path}: missing {key!r}")
    return meta


def write_sequence(root, seq: FrameSequence) -> Path:
    """Write frames, annotations and sequence.json below ``root/<sequence_id>``."""
    sdir = Path(root) / seq.sequence_id
    (sdir / "frames").mkdir(parents=True, exist_ok=True)
    (sdir / "annotations").mkdir(exist_ok=True)
    for cloud in seq.frames:
        write_frame(sdir / "frames" / f"{frame_name(cloud.frame_index)}.uflw", cloud)
    for idx, anns in sorted(seq.annotations.items()):
        write_annotations(sdir / "annotations" / f"{frame_name(idx)}.json", anns)
    meta = {"sequence_id": seq.sequence_id, "annotated_frames": list(seq.annotated)}
    (sdir / "sequence.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
    return sdir


def list_sequences(root) -> list[str]:
    root = Path(root)
    if not root.is_dir():
        raise FormatError(f"{root}: not a directory")
    return sorted(p.name for p in root.iterdir() if p.is_dir() and (p / "sequence.json").exists())


def scan_sequence(root, sequence_id: str) -> tuple[list[int], list[int]]:
    """Frame indices present on disk and the declared keyframes, without reading payloads."""
    sdir = Path(root) / sequence_id
    try:
        meta = json.loads((sdir / "sequence.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{sdir}: unreadable sequence.json ({exc})") from exc
    frames = []
    for p in sorted((sdir / "frames").glob("*.uflw")):
        try:
            frames.append(int(p.stem))
        except ValueError as exc:
            raise FormatError(f"{p}: frame file name is not an index") from exc
    annotated = meta.get("annotated_frames")
    if annotated is None:
        annotated = sorted(int(p.stem) for p in (sdir / "annotations").glob("*.json"))
    return sorted(frames), sorted(int(i) for i in annotated)


def read_sequence(root, sequence_id: str, taxonomy=None, frame_indices=None) -> FrameSequence:
    meta = read_dataset_meta(root)
    all_frames, annotated = scan_sequence(root, sequence_id)
    wanted = all_frames if frame_indices is None else list(frame_indices)
    sdir = Path(root) / sequence_id
    frames = []
    annotations = {}
    for idx in wanted:
        cloud = read_frame(sdir / "frames" / f"{frame_name(idx)}.uflw")
        if cloud.frame_index != idx:
            raise FormatError(f"{sdir}: file {frame_name(idx)} holds frame {cloud.frame_index}")
        frames.append(cloud)
        apath = sdir / "annotations" / f"{frame_name(idx)}.json"
        if apath.exists():
            annotations[idx] = read_annotations(apath, idx, meta["dataset_id"], taxonomy)
    kept = set(wanted)
    return FrameSequence(
        dataset_id=meta["dataset_id"],
        sequence_id=sequence_id,
        frames=tuple(frames),
        annotations=annotations,
        annotated=tuple(i for i in annotated if i in kept),
        native_hz=float(meta["native_hz"]),
    )


def write_json(path, obj) -> None:
    """Sorted-key JSON with a trailing newline, stable enough for byte comparison."""
    text = json.dumps(obj, sort_keys=True, indent=2, allow_nan=False)
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(text + "\n")
    os.replace(tmp, path)
