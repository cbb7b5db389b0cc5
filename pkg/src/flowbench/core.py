"""Geometry and domain types shared by every module.

Arrays are stored struct-of-arrays (one ``(N, 3)`` float64 array for positions
instead of a list of point objects) and are frozen on construction so that the
types can be shared between workers without copies.
"""

from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from .errors import InvalidPose, MalformedAnnotations, ShapeError

POSE_TOL = 1e-9

# coarse_class code used in PointMeta for points outside every annotated box
BACKGROUND = -1


class CoarseClass(enum.IntEnum):
    CAR = 0
    OTHER = 1
    PEDESTRIAN = 2
    VRU = 3


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


def rot_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``x -> R x + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64)
        if R.shape != (3, 3) or t.shape != (3,):
            raise InvalidPose(f"expected 3x3 rotation and 3-vector, got {R.shape} / {t.shape}")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidPose("pose contains non-finite values")
        if np.max(np.abs(R.T @ R - np.eye(3))) > POSE_TOL:
            raise InvalidPose("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > POSE_TOL:
            raise InvalidPose("rotation determinant is not +1")
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> Pose:
        return cls(rot_z(yaw), translation)

    @classmethod
    def from_matrix(cls, m) -> Pose:
        """Accepts a 4x4 homogeneous matrix or a 3x4 ``[R|t]`` block."""
        m = np.asarray(m, dtype=np.float64)
        if m.shape == (12,):
            m = m.reshape(3, 4)
        if m.shape not in ((3, 4), (4, 4)):
            raise InvalidPose(f"cannot build a pose from shape {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def as_row_major_12(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation[:, None]]).reshape(12)

    def __matmul__(self, other: Pose) -> Pose:
        # (self @ other)(x) == self(other(x))
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> Pose:
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    @property
    def yaw(self) -> float:
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    def allclose(self, other: Pose, atol: float = POSE_TOL) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, rtol=0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0, atol=atol)
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(np.array_equal(self.rotation, other.rotation) and np.array_equal(self.translation, other.translation))

    def __repr__(self) -> str:
        return f"Pose(yaw={self.yaw:.6f}, t={self.translation.tolist()})"


class Point(NamedTuple):
    x: float
    y: float
    z: float
    beam_id: int
    t_offset: float


@dataclass(frozen=True, eq=False)
class PointCloud:
    """One LiDAR sweep in its sensor frame; ``ego_pose`` maps sensor -> world."""

    xyz: np.ndarray
    beam_id: np.ndarray
    t_offset: np.ndarray
    ego_pose: Pose
    frame_index: int
    timestamp: float
    beam_count: int
    dataset_id: str

    def __post_init__(self):
        xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        beam = np.asarray(self.beam_id, dtype=np.int32).reshape(-1)
        toff = np.asarray(self.t_offset, dtype=np.float64).reshape(-1)
        n = len(xyz)
        if len(beam) != n or len(toff) != n:
            raise ShapeError(f"point arrays disagree in length: {n}, {len(beam)}, {len(toff)}")
        if not np.all(np.isfinite(xyz)):
            raise ShapeError("point coordinates must be finite")
        if self.beam_count < 1:
            raise ShapeError("beam_count must be >= 1")
        if n and (beam.min() < 0 or beam.max() >= self.beam_count):
            raise ShapeError(f"beam ids must lie in [0, {self.beam_count})")
        object.__setattr__(self, "xyz", _frozen(xyz))
        object.__setattr__(self, "beam_id", _frozen(beam))
        object.__setattr__(self, "t_offset", _frozen(toff))
        object.__setattr__(self, "frame_index", int(self.frame_index))
        object.__setattr__(self, "timestamp", float(self.timestamp))
        object.__setattr__(self, "beam_count", int(self.beam_count))

    @classmethod
    def from_points(cls, points: Sequence[Point], **header) -> PointCloud:
        arr = np.array([tuple(p) for p in points], dtype=np.float64).reshape(-1, 5)
        return cls(xyz=arr[:, :3], beam_id=arr[:, 3].astype(np.int32), t_offset=arr[:, 4], **header)

    def __len__(self) -> int:
        return len(self.xyz)

    def points(self) -> Iterator[Point]:
        for (x, y, z), b, t in zip(self.xyz.tolist(), self.beam_id.tolist(), self.t_offset.tolist()):
            yield Point(x, y, z, b, t)

    def replace(self, **changes) -> PointCloud:
        return dataclasses.replace(self, **changes)

    def select(self, mask: np.ndarray) -> PointCloud:
        """Subset of points (boolean mask or index array); order of survivors is kept."""
        return self.replace(xyz=self.xyz[mask], beam_id=self.beam_id[mask], t_offset=self.t_offset[mask])

    def world_xyz(self) -> np.ndarray:
        return self.ego_pose.apply(self.xyz)

    def distinct_beams(self) -> int:
        return int(np.unique(self.beam_id).size)


@dataclass(frozen=True, eq=False)
class ObjectAnnotation:
    instance_id: str
    raw_class: str
    coarse_class: CoarseClass | None  # None == UNMAPPED
    box_center: np.ndarray
    box_size: np.ndarray
    box_yaw: float
    frame_index: int

    def __post_init__(self):
        center = np.asarray(self.box_center, dtype=np.float64).reshape(3)
        size = np.asarray(self.box_size, dtype=np.float64).reshape(3)
        if not np.all(size > 0):
            raise MalformedAnnotations(f"box size must be strictly positive for {self.instance_id!r}")
        object.__setattr__(self, "box_center", _frozen(center))
        object.__setattr__(self, "box_size", _frozen(size))
        object.__setattr__(self, "box_yaw", float(self.box_yaw))
        if self.coarse_class is not None:
            object.__setattr__(self, "coarse_class", CoarseClass(self.coarse_class))

    @property
    def box_pose(self) -> Pose:
        return Pose.from_yaw(self.box_yaw, self.box_center)

    def contains(self, world_xyz: np.ndarray) -> np.ndarray:
        """Inclusive point-in-box test after moving points into the box frame."""
        local = self.box_pose.inverse().apply(world_xyz)
        return np.all(np.abs(local) <= self.box_size / 2.0, axis=1)


@dataclass(frozen=True, eq=False)
class FlowField:
    """Per-point motion of the first sweep, m/frame, in its ego-compensated frame."""

    vectors: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        vec = np.asarray(self.vectors, dtype=np.float64).reshape(-1, 3)
        valid = np.asarray(self.valid, dtype=bool).reshape(-1)
        if len(valid) != len(vec):
            raise ShapeError(f"{len(vec)} vectors but {len(valid)} mask entries")
        if not np.all(np.isfinite(vec[valid])):
            raise ShapeError("flow vectors must be finite where valid")
        object.__setattr__(self, "vectors", _frozen(vec))
        object.__setattr__(self, "valid", _frozen(valid))

    @classmethod
    def zeros(cls, n: int) -> FlowField:
        return cls(np.zeros((n, 3)), np.ones(n, dtype=bool))

    def __len__(self) -> int:
        return len(self.vectors)

    def select(self, mask) -> FlowField:
        return FlowField(self.vectors[mask], self.valid[mask])


@dataclass(frozen=True, eq=False)
class PointMeta:
    """Per-point ground truth of the first sweep used by the metrics."""

    gt_flow: np.ndarray
    gt_speed: np.ndarray
    coarse_class: np.ndarray  # int8 CoarseClass codes, BACKGROUND for unboxed points
    instance: np.ndarray  # int32 index into instance_ids, -1 for none
    instance_ids: tuple[str, ...]
    is_ground: np.ndarray
    range_m: np.ndarray

    def __post_init__(self):
        flow = np.asarray(self.gt_flow, dtype=np.float64).reshape(-1, 3)
        n = len(flow)
        arrays = {
            "gt_speed": np.asarray(self.gt_speed, dtype=np.float64).reshape(-1),
            "coarse_class": np.asarray(self.coarse_class, dtype=np.int8).reshape(-1),
            "instance": np.asarray(self.instance, dtype=np.int32).reshape(-1),
            "is_ground": np.asarray(self.is_ground, dtype=bool).reshape(-1),
            "range_m": np.asarray(self.range_m, dtype=np.float64).reshape(-1),
        }
        for name, arr in arrays.items():
            if len(arr) != n:
                raise ShapeError(f"PointMeta.{name} has {len(arr)} entries, expected {n}")
            object.__setattr__(self, name, _frozen(arr))
        object.__setattr__(self, "gt_flow", _frozen(flow))
        object.__setattr__(self, "instance_ids", tuple(self.instance_ids))

    def __len__(self) -> int:
        return len(self.gt_flow)

    def select(self, mask) -> PointMeta:
        return PointMeta(
            gt_flow=self.gt_flow[mask],
            gt_speed=self.gt_speed[mask],
            coarse_class=self.coarse_class[mask],
            instance=self.instance[mask],
            instance_ids=self.instance_ids,
            is_ground=self.is_ground[mask],
            range_m=self.range_m[mask],
        )

    def instance_of(self, i: int) -> str | None:
        k = int(self.instance[i])
        return None if k < 0 else self.instance_ids[k]


@dataclass(frozen=True, eq=False)
class FramePair:
    """Two adjacent sweeps; ``gt_flow``/``meta`` ride along once computed so
    augmentations can keep them aligned with the first sweep."""

    first: PointCloud
    second: PointCloud
    annotations_first: tuple[ObjectAnnotation, ...] = ()
    annotations_second: tuple[ObjectAnnotation, ...] = ()
    sequence_id: str = ""
    gt_flow: FlowField | None = None
    meta: PointMeta | None = None

    def __post_init__(self):
        if self.second.timestamp - self.first.timestamp <= 0:
            raise ShapeError("frame pair requires second.timestamp > first.timestamp")
        if self.first.dataset_id != self.second.dataset_id:
            raise ShapeError("frame pair mixes datasets")
        object.__setattr__(self, "annotations_first", tuple(self.annotations_first))
        object.__setattr__(self, "annotations_second", tuple(self.annotations_second))
        for extra in (self.gt_flow, self.meta):
            if extra is not None and len(extra) != len(self.first):
                raise ShapeError("ground truth does not match the first sweep")

    @property
    def dt(self) -> float:
        return self.second.timestamp - self.first.timestamp

    @property
    def dataset_id(self) -> str:
        return self.first.dataset_id

    @property
    def key(self) -> str:
        """Stable identity used to derive per-pair seeds and file names."""
        return f"{self.dataset_id}/{self.sequence_id}/{self.first.frame_index}-{self.second.frame_index}"

    def replace(self, **changes) -> FramePair:
        return dataclasses.replace(self, **changes)

    def with_ground_truth(self, ground_mask: np.ndarray | None = None) -> FramePair:
        flow, meta = gt_flow_from_annotations(self, ground_mask=ground_mask)
        return self.replace(gt_flow=flow, meta=meta)


def apply_pose(cloud: PointCloud, pose: Pose) -> PointCloud:
    """Move every point by ``pose``.

    The returned cloud's ``ego_pose`` is adjusted so world coordinates are
    unchanged (``new_ego = ego @ pose^-1``).
    """
    if not isinstance(pose, Pose):
        pose = Pose(*pose)
    return cloud.replace(xyz=pose.apply(cloud.xyz), ego_pose=cloud.ego_pose @ pose.inverse())


def compensate_ego(pair: FramePair) -> Pose:
    """Transform taking first-sweep sensor coordinates into the second sensor frame
    under a static world."""
    return pair.second.ego_pose.inverse() @ pair.first.ego_pose


def _check_unique(annotations: Iterable[ObjectAnnotation], which: str) -> None:
    seen = set()
    for ann in annotations:
        if ann.instance_id in seen:
            raise MalformedAnnotations(f"duplicate instance_id {ann.instance_id!r} in {which} frame")
        seen.add(ann.instance_id)


def gt_flow_from_annotations(pair: FramePair, ground_mask: np.ndarray | None = None) -> tuple[FlowField, PointMeta]:
    """Ground-truth flow of ``pair.first`` from box tracks.

    A point takes the rigid motion of the first box (by instance id order) that
    contains it. Boxes without a successor in the second frame mark their
    points invalid.
    """
    _check_unique(pair.annotations_first, "first")
    _check_unique(pair.annotations_second, "second")
    successors = {a.instance_id: a for a in pair.annotations_second}

    cloud = pair.first
    n = len(cloud)
    ego = cloud.ego_pose
    world = ego.apply(cloud.xyz)
    vectors = np.zeros((n, 3))
    valid = np.ones(n, dtype=bool)
    classes = np.full(n, BACKGROUND, dtype=np.int8)
    instance = np.full(n, -1, dtype=np.int32)
    assigned = np.zeros(n, dtype=bool)

    ordered = sorted(pair.annotations_first, key=lambda a: a.instance_id)
    ids = tuple(a.instance_id for a in ordered)
    for k, ann in enumerate(ordered):
        if ann.coarse_class is None:
            raise MalformedAnnotations(f"instance {ann.instance_id!r} has an unmapped class {ann.raw_class!r}")
        nxt = successors.get(ann.instance_id)
        if nxt is not None and nxt.coarse_class != ann.coarse_class:
            raise MalformedAnnotations(f"instance {ann.instance_id!r} changes class between frames")
        inside = ann.contains(world) & ~assigned
        if not inside.any():
            continue
        assigned |= inside
        classes[inside] = int(ann.coarse_class)
        instance[inside] = k
        if nxt is None:
            valid[inside] = False
            continue
        if nxt.box_yaw == ann.box_yaw and np.array_equal(nxt.box_center, ann.box_center):
            continue  # static box: exactly zero flow
        motion = ego.inverse() @ nxt.box_pose @ ann.box_pose.inverse() @ ego
        p = cloud.xyz[inside]
        vectors[inside] = motion.apply(p) - p

    if ground_mask is None:
        ground_mask = np.zeros(n, dtype=bool)
    meta = PointMeta(
        gt_flow=vectors,
        gt_speed=np.linalg.norm(vectors, axis=1),
        coarse_class=classes,
        instance=instance,
        instance_ids=ids,
        is_ground=ground_mask,
        range_m=np.hypot(cloud.xyz[:, 0], cloud.xyz[:, 1]),
    )
    return FlowField(vectors, valid), meta


@dataclass(frozen=True, eq=False)
class FrameSequence:
    """Ordered sweeps of one recording plus per-frame box annotations.

    ``annotated`` lists the keyframes whose flow labels may be used; annotation
    boxes may exist on other frames too (the real adjacent scans).
    """

    dataset_id: str
    sequence_id: str
    frames: tuple[PointCloud, ...]
    annotations: dict = field(default_factory=dict)  # frame_index -> tuple[ObjectAnnotation, ...]
    annotated: tuple[int, ...] = ()
    native_hz: float = 10.0

    def __post_init__(self):
        frames = tuple(self.frames)
        for a, b in zip(frames, frames[1:]):
            if b.frame_index <= a.frame_index or b.timestamp <= a.timestamp:
                raise ShapeError(f"sequence {self.sequence_id!r} is not strictly increasing at frame {b.frame_index}")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "annotations", {int(k): tuple(v) for k, v in self.annotations.items()})
        object.__setattr__(self, "annotated", tuple(sorted(int(i) for i in self.annotated)))

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def frame_indices(self) -> tuple[int, ...]:
        return tuple(f.frame_index for f in self.frames)

    def replace(self, **changes) -> FrameSequence:
        return dataclasses.replace(self, **changes)
