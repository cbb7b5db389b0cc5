"""Deterministic synthetic scenes and a ray-casting LiDAR.

Geometry is analytic (one ground plane plus oriented boxes) so every return
has an exact provenance and exact motion, which the tests use as an oracle.
Randomness goes through numpy's counter-based Philox generator keyed by
``(seed, frame_index, stream)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import FrameSequence, ObjectAnnotation, PointCloud, Pose, FlowField, rot_z
from .errors import InvalidScene
from .unify import TaxonomyMap, default_taxonomy

# provenance codes returned by simulate_lidar(return_hits=True)
HIT_GROUND = -1
NO_HIT = -10**6


def structure_hit_code(j: int) -> int:
    """Static (unannotated) structure ``j`` is reported as ``-(2 + j)``."""
    return -(2 + j)


# per-class defaults: (l, w, h), ground clearance
CLASS_SHAPES = {
    "car": ((4.5, 1.9, 1.6), 0.15),
    "truck": ((8.0, 2.5, 3.2), 0.3),
    "bus": ((11.0, 2.6, 3.2), 0.3),
    "pedestrian": ((0.6, 0.6, 1.8), 0.05),
    "bicycle": ((1.8, 0.6, 1.7), 0.05),
    "motorcycle": ((2.1, 0.8, 1.5), 0.05),
}


@dataclass
class ObjectSpec:
    raw_class: str
    x: float
    y: float
    yaw: float = 0.0
    speed: float = 0.0  # m/s along heading
    yaw_rate: float = 0.0  # rad/s
    size: tuple | None = None  # (l, w, h); class default when None
    clearance: float | None = None
    instance_id: str | None = None

    def resolved_size(self) -> np.ndarray:
        if self.size is not None:
            return np.asarray(self.size, dtype=np.float64)
        return np.asarray(CLASS_SHAPES.get(self.raw_class, ((4.0, 2.0, 1.5), 0.1))[0], dtype=np.float64)

    def resolved_clearance(self) -> float:
        if self.clearance is not None:
            return float(self.clearance)
        return float(CLASS_SHAPES.get(self.raw_class, ((4.0, 2.0, 1.5), 0.1))[1])


@dataclass
class StructureSpec:
    """Static, unannotated geometry such as walls; contributes background points."""

    x: float
    y: float
    size: tuple
    yaw: float = 0.0
    z_bottom: float = 0.0


@dataclass
class SceneConfig:
    seed: int = 0
    duration_frames: int = 10
    frame_hz: float = 10.0
    ego_speed: float = 0.0  # m/s
    ego_yaw_rate: float = 0.0  # rad/s
    objects: list = field(default_factory=list)
    structures: list = field(default_factory=list)
    ground_slope_deg: float = 0.0  # plane rises along world +x
    extent: float = 120.0  # ground is the square |x|, |y| <= extent
    annotation_margin: float = 0.01  # boxes are annotated this much larger than the solid

    def __post_init__(self):
        if self.frame_hz <= 0:
            raise InvalidScene("frame_hz must be positive")
        if self.extent <= 0:
            raise InvalidScene("extent must be positive")
        if self.duration_frames < 1:
            raise InvalidScene("duration_frames must be >= 1")
        self.objects = [o if isinstance(o, ObjectSpec) else ObjectSpec(**o) for o in self.objects]
        self.structures = [s if isinstance(s, StructureSpec) else StructureSpec(**s) for s in self.structures]
        for o in self.objects:
            if o.speed < 0:
                raise InvalidScene("object speeds must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> SceneConfig:
        return cls(**d)


@dataclass
class SensorConfig:
    beam_count: int = 32
    elevation_min: float = -25.0  # degrees
    elevation_max: float = 10.0
    azimuth_steps: int = 1024
    mount_height: float = 1.8
    max_range: float = 100.0
    range_noise_sigma: float = 0.0

    def __post_init__(self):
        if self.beam_count < 1:
            raise InvalidScene("beam_count must be >= 1")
        if self.beam_count > 1 and not self.elevation_min < self.elevation_max:
            raise InvalidScene("elevation_min must be below elevation_max")
        if self.max_range <= 0:
            raise InvalidScene("max_range must be positive")
        if self.azimuth_steps < 1:
            raise InvalidScene("azimuth_steps must be >= 1")

    def elevations(self) -> np.ndarray:
        """Beam elevation angles in radians; beam 0 is the lowest."""
        if self.beam_count == 1:
            return np.array([math.radians(self.elevation_min)])
        return np.radians(np.linspace(self.elevation_min, self.elevation_max, self.beam_count))

    @classmethod
    def from_dict(cls, d: dict) -> SensorConfig:
        return cls(**d)


@dataclass(frozen=True)
class ObjectState:
    instance_id: str
    raw_class: str
    center: np.ndarray
    yaw: float
    size: np.ndarray


@dataclass(frozen=True)
class WorldState:
    frame_index: int
    timestamp: float
    frame_hz: float
    ego_pose: Pose  # vehicle -> world, on the ground
    objects: tuple
    structures: tuple  # ObjectState with empty instance id
    ground_slope: float  # radians
    extent: float


def ground_height(x, y, slope: float):
    return np.tan(slope) * np.asarray(x, dtype=np.float64) + 0.0 * np.asarray(y, dtype=np.float64)


def _ctrv(x0: float, y0: float, yaw0: float, v: float, w: float, t: float):
    """Closed-form constant turn-rate and velocity motion."""
    yaw = yaw0 + w * t
    if w == 0.0:
        return x0 + v * t * math.cos(yaw0), y0 + v * t * math.sin(yaw0), yaw
    r = v / w
    return x0 + r * (math.sin(yaw) - math.sin(yaw0)), y0 + r * (math.cos(yaw0) - math.cos(yaw)), yaw


def _footprint(center, size, yaw) -> np.ndarray:
    l, w = size[0] / 2.0, size[1] / 2.0
    corners = np.array([[l, w], [l, -w], [-l, -w], [-l, w]])
    return corners @ rot_z(yaw)[:2, :2].T + np.asarray(center)[:2]


def boxes_overlap(a: ObjectState, b: ObjectState) -> bool:
    """Separating-axis test on the footprints plus a vertical interval check."""
    za = (a.center[2] - a.size[2] / 2, a.center[2] + a.size[2] / 2)
    zb = (b.center[2] - b.size[2] / 2, b.center[2] + b.size[2] / 2)
    if za[1] < zb[0] or zb[1] < za[0]:
        return False
    pa, pb = _footprint(a.center, a.size, a.yaw), _footprint(b.center, b.size, b.yaw)
    for poly in (pa, pb):
        for i in range(4):
            edge = poly[(i + 1) % 4] - poly[i]
            axis = np.array([-edge[1], edge[0]])
            proj_a, proj_b = pa @ axis, pb @ axis
            if proj_a.max() < proj_b.min() or proj_b.max() < proj_a.min():
                return False
    return True


def _object_state(spec: ObjectSpec, k: int, cfg: SceneConfig, slope: float, frame: int) -> ObjectState:
    t = frame / cfg.frame_hz
    x, y, yaw = _ctrv(spec.x, spec.y, spec.yaw, spec.speed, spec.yaw_rate, t)
    size = spec.resolved_size()
    # rest on the highest ground under the footprint so sloped ground never cuts the box
    corners = _footprint((x, y), size, yaw)
    z = float(ground_height(corners[:, 0], corners[:, 1], slope).max()) + spec.resolved_clearance() + size[2] / 2.0
    return ObjectState(spec.instance_id or f"obj{k:03d}", spec.raw_class, np.array([x, y, z]), yaw, size)


def generate_scene(cfg: SceneConfig, taxonomy: TaxonomyMap | None = None, dataset_id: str = "synth"):
    """World states and box annotations for every frame of ``cfg``.

    Returns ``(states, annotations)`` where ``annotations[k]`` is a tuple of
    ObjectAnnotation for frame ``k``.
    """
    taxonomy = taxonomy or default_taxonomy()
    slope = math.radians(cfg.ground_slope_deg)
    ids = [o.instance_id or f"obj{k:03d}" for k, o in enumerate(cfg.objects)]
    if len(set(ids)) != len(ids):
        raise InvalidScene("duplicate object instance ids")
    structures = tuple(
        ObjectState("", "structure", np.array([s.x, s.y, s.z_bottom + s.size[2] / 2.0]), s.yaw, np.asarray(s.size, float))
        for s in cfg.structures
    )
    initial = [_object_state(o, k, cfg, slope, 0) for k, o in enumerate(cfg.objects)]
    solids = initial + list(structures)
    for i in range(len(solids)):
        for j in range(i + 1, len(solids)):
            if boxes_overlap(solids[i], solids[j]):
                raise InvalidScene(f"initial boxes {i} and {j} overlap")

    states, annotations = [], []
    for frame in range(cfg.duration_frames):
        t = frame / cfg.frame_hz
        ex, ey, eyaw = _ctrv(0.0, 0.0, 0.0, cfg.ego_speed, cfg.ego_yaw_rate, t)
        ego = Pose.from_yaw(eyaw, (ex, ey, float(ground_height(ex, ey, slope))))
        objects = tuple(_object_state(o, k, cfg, slope, frame) for k, o in enumerate(cfg.objects))
        states.append(WorldState(frame, t, cfg.frame_hz, ego, objects, structures, slope, cfg.extent))
        annotations.append(
            tuple(
                ObjectAnnotation(
                    instance_id=o.instance_id,
                    raw_class=o.raw_class,
                    coarse_class=taxonomy.map(dataset_id, o.raw_class),
                    box_center=o.center,
                    box_size=o.size + 2.0 * cfg.annotation_margin,
                    box_yaw=o.yaw,
                    frame_index=frame,
                )
                for o in objects
            )
        )
    return states, annotations


def sensor_pose(state: WorldState, sensor: SensorConfig) -> Pose:
    return state.ego_pose @ Pose(np.eye(3), (0.0, 0.0, sensor.mount_height))


def ray_directions(sensor: SensorConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unit ray directions in the sensor frame, ordered azimuth-major.

    Returns ``(dirs, beam_ids, azimuth_index)``.
    """
    elev = sensor.elevations()
    az = 2.0 * np.pi * np.arange(sensor.azimuth_steps) / sensor.azimuth_steps
    A, E = np.meshgrid(az, elev, indexing="ij")
    ce = np.cos(E)
    dirs = np.stack([ce * np.cos(A), ce * np.sin(A), np.sin(E)], axis=-1).reshape(-1, 3)
    beams = np.tile(np.arange(sensor.beam_count, dtype=np.int32), sensor.azimuth_steps)
    az_idx = np.repeat(np.arange(sensor.azimuth_steps), sensor.beam_count)
    return dirs, beams, az_idx


def _ray_box(origin: np.ndarray, dirs: np.ndarray, box: ObjectState) -> np.ndarray:
    """Entry distance of each ray into ``box`` (slab method); inf on a miss."""
    R = rot_z(box.yaw)
    o = R.T @ (origin - box.center)
    d = dirs @ R  # == (R.T @ dirs.T).T
    half = box.size / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    lo = np.fmin(t1, t2)
    hi = np.fmax(t1, t2)
    # axis-parallel rays: inside the slab means unconstrained, outside means miss
    parallel = d == 0.0
    inside_slab = np.abs(o) <= half
    lo = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), lo)
    hi = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), hi)
    tmin = lo.max(axis=1)
    tmax = hi.min(axis=1)
    hit = (tmax >= tmin) & (tmin > 0.0)
    return np.where(hit, tmin, np.inf)


def cast_rays(state: WorldState, origin: np.ndarray, dirs_world: np.ndarray, max_range: float):
    """Nearest hit distance and provenance code for each world-frame ray."""
    n = len(dirs_world)
    best = np.full(n, np.inf)
    code = np.full(n, NO_HIT, dtype=np.int64)

    s = state.ground_slope
    normal = np.array([-math.sin(s), 0.0, math.cos(s)])
    denom = dirs_world @ normal
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = -(origin @ normal) / denom
    tg = np.where((denom != 0.0) & (tg > 0.0), tg, np.inf)
    finite = np.isfinite(tg)
    hitp = origin + np.where(finite, tg, 0.0)[:, None] * dirs_world
    on_plane = finite & (np.abs(hitp[:, 0]) <= state.extent) & (np.abs(hitp[:, 1]) <= state.extent)
    tg = np.where(on_plane, tg, np.inf)
    closer = tg < best
    best[closer], code[closer] = tg[closer], HIT_GROUND

    for k, box in enumerate(state.objects):
        tb = _ray_box(origin, dirs_world, box)
        closer = tb < best
        best[closer], code[closer] = tb[closer], k
    for j, box in enumerate(state.structures):
        tb = _ray_box(origin, dirs_world, box)
        closer = tb < best
        best[closer], code[closer] = tb[closer], structure_hit_code(j)

    miss = best > max_range
    best[miss] = np.inf
    code[miss] = NO_HIT
    return best, code


def _rng(seed: int, frame_index: int, stream: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed) & (2**64 - 1), int(frame_index), int(stream)])
    return np.random.Generator(np.random.Philox(ss))


def simulate_lidar(state: WorldState, sensor: SensorConfig, seed: int, dataset_id: str = "synth", return_hits: bool = False):
    """Ray-cast one sweep. Points are in the sensor frame; ``ego_pose`` is the
    sensor pose in the world."""
    pose = sensor_pose(state, sensor)
    dirs, beams, az_idx = ray_directions(sensor)
    dist, code = cast_rays(state, pose.translation, dirs @ pose.rotation.T, sensor.max_range)
    # one noise draw per ray regardless of hits keeps streams aligned across scenes
    noise = _rng(seed, state.frame_index).standard_normal(len(dirs)) * sensor.range_noise_sigma
    rng_ = dist + noise
    keep = np.isfinite(dist) & (rng_ > 0.0)
    cloud = PointCloud(
        xyz=dirs[keep] * rng_[keep, None],
        beam_id=beams[keep],
        t_offset=az_idx[keep] / sensor.azimuth_steps / state.frame_hz,
        ego_pose=pose,
        frame_index=state.frame_index,
        timestamp=state.timestamp,
        beam_count=sensor.beam_count,
        dataset_id=dataset_id,
    )
    if return_hits:
        return cloud, code[keep]
    return cloud


def oracle_flow(state_t: WorldState, state_t1: WorldState, cloud_t: PointCloud, hits: np.ndarray | None = None) -> FlowField:
    """Per-point flow from the simulator's own object motion (not from boxes).

    Provenance is re-derived by re-casting each point's ray when ``hits`` is not
    given. Objects that vanish in ``state_t1`` yield invalid points.
    """
    xyz = cloud_t.xyz
    R1 = cloud_t.ego_pose.rotation
    t1 = cloud_t.ego_pose.translation
    if hits is None:
        norms = np.linalg.norm(xyz, axis=1)
        dirs = xyz / np.where(norms > 0, norms, 1.0)[:, None]
        _, hits = cast_rays(state_t, t1, dirs @ R1.T, np.inf)
    later = {o.instance_id: o for o in state_t1.objects}
    vectors = np.zeros_like(xyz)
    valid = np.ones(len(xyz), dtype=bool)
    for k, obj in enumerate(state_t.objects):
        sel = hits == k
        if not sel.any():
            continue
        nxt = later.get(obj.instance_id)
        if nxt is None:
            valid[sel] = False
            continue
        world = xyz[sel] @ R1.T + t1
        rel = world - obj.center
        dyaw = nxt.yaw - obj.yaw
        c, s = math.cos(dyaw), math.sin(dyaw)
        moved = np.empty_like(rel)
        moved[:, 0] = c * rel[:, 0] - s * rel[:, 1]
        moved[:, 1] = s * rel[:, 0] + c * rel[:, 1]
        moved[:, 2] = rel[:, 2]
        moved += nxt.center
        vectors[sel] = (moved - world) @ R1
    return FlowField(vectors, valid)


def synth_sequence(
    cfg: SceneConfig,
    sensor: SensorConfig,
    dataset_id: str = "synth",
    sequence_id: str = "seq000",
    annotation_every: int = 1,
    taxonomy: TaxonomyMap | None = None,
    return_states: bool = False,
):
    """Simulate a whole sequence. Every frame gets boxes; keyframes are every
    ``annotation_every``-th frame starting at 0."""
    states, annotations = generate_scene(cfg, taxonomy=taxonomy, dataset_id=dataset_id)
    frames = tuple(simulate_lidar(s, sensor, cfg.seed, dataset_id=dataset_id) for s in states)
    seq = FrameSequence(
        dataset_id=dataset_id,
        sequence_id=sequence_id,
        frames=frames,
        annotations={k: a for k, a in enumerate(annotations)},
        annotated=tuple(range(0, cfg.duration_frames, annotation_every)),
        native_hz=cfg.frame_hz,
    )
    if return_states:
        return seq, states
    return seq


def random_scene_config(
    seed: int,
    n_objects: int = 4,
    duration_frames: int = 2,
    frame_hz: float = 10.0,
    max_speed: float = 15.0,
    max_yaw_rate: float = 0.5,
    ego_speed: float | None = None,
    classes=("car", "truck", "pedestrian", "bicycle"),
    n_structures: int = 1,
) -> SceneConfig:
    """Random but well-separated scene; objects never overlap during the sequence."""
    rng = np.random.default_rng(seed)
    for _ in range(100):
        objects = []
        slots = rng.permutation(n_objects + n_structures)
        span = 2 * np.pi / (n_objects + n_structures)
        for k in range(n_objects):
            ang = slots[k] * span + rng.uniform(-0.15, 0.15) * span
            rad = rng.uniform(12.0, 40.0)
            cls = str(rng.choice(classes))
            speed = rng.uniform(0.0, max_speed) if rng.random() < 0.8 else 0.0
            if cls in ("pedestrian",):
                speed = min(speed, 2.5)
            objects.append(
                ObjectSpec(
                    raw_class=cls,
                    x=float(rad * math.cos(ang)),
                    y=float(rad * math.sin(ang)),
                    yaw=float(rng.uniform(-np.pi, np.pi)),
                    speed=float(speed),
                    yaw_rate=float(rng.uniform(-max_yaw_rate, max_yaw_rate)),
                    instance_id=f"obj{k:03d}",
                )
            )
        structures = []
        for j in range(n_structures):
            ang = slots[n_objects + j] * span
            rad = rng.uniform(25.0, 45.0)
            structures.append(
                StructureSpec(x=float(rad * math.cos(ang)), y=float(rad * math.sin(ang)), size=(6.0, 6.0, 4.0), yaw=float(ang))
            )
        cfg = SceneConfig(
            seed=int(rng.integers(0, 2**63)),
            duration_frames=duration_frames,
            frame_hz=frame_hz,
            ego_speed=float(rng.uniform(0.0, 10.0)) if ego_speed is None else ego_speed,
            ego_yaw_rate=float(rng.uniform(-0.1, 0.1)),
            objects=objects,
            structures=structures,
        )
        try:
            states, _ = generate_scene(cfg)
        except InvalidScene:
            continue
        if _separated(states, cfg.annotation_margin):
            return cfg
    raise InvalidScene(f"could not place a non-overlapping random scene for seed {seed}")


def _separated(states, margin: float) -> bool:
    for st in states:
        boxes = [
            ObjectState(o.instance_id, o.raw_class, o.center, o.yaw, o.size + 4 * margin) for o in st.objects
        ] + list(st.structures)
        ego_xy = st.ego_pose.translation[:2]
        for i in range(len(boxes)):
            if np.linalg.norm(boxes[i].center[:2] - ego_xy) < np.linalg.norm(boxes[i].size[:2]) / 2 + 2.0:
                return False
            for j in range(i + 1, len(boxes)):
                if boxes_overlap(boxes[i], boxes[j]):
                    return False
    return True


# -- named fixtures ---------------------------------------------------------


def ground_fixture(slope_deg: float = 0.0, noise: float = 0.0, seed: int = 0) -> tuple[SceneConfig, SensorConfig]:
    """Single sweep over a (possibly tilted) plane with mixed boxes and a wall."""
    objects = [
        ObjectSpec("truck", 15.0, 3.0, yaw=0.3, size=(4.0, 2.0, 2.0), clearance=0.1, instance_id="truck0"),
        ObjectSpec("car", -10.0, -12.0, yaw=1.0, instance_id="car0"),
        ObjectSpec("pedestrian", 6.0, -8.0, instance_id="ped0"),
        ObjectSpec("car", 30.0, 20.0, yaw=2.0, instance_id="car1"),
        ObjectSpec("bus", -25.0, 15.0, yaw=0.5, instance_id="bus0"),
    ]
    cfg = SceneConfig(
        seed=seed,
        duration_frames=1,
        objects=objects,
        structures=[StructureSpec(0.0, 40.0, (20.0, 1.0, 5.0))],
        ground_slope_deg=slope_deg,
    )
    sensor = SensorConfig(beam_count=64, elevation_min=-25.0, elevation_max=5.0, azimuth_steps=2048, range_noise_sigma=noise)
    return cfg, sensor


def cube_fixture(speed: float = 8.0, noise: float = 0.0, frame_hz: float = 10.0, duration_frames: int = 2, seed: int = 7) -> tuple[SceneConfig, SensorConfig]:
    """One 2 m cube 10 m ahead of a parked sensor, scanned densely.

    At the default 8 m/s and 10 Hz the cube moves 0.8 m per frame.
    """
    cfg = SceneConfig(
        seed=seed,
        duration_frames=duration_frames,
        frame_hz=frame_hz,
        objects=[ObjectSpec("car", 10.0, 0.0, yaw=0.3, speed=speed, size=(2.0, 2.0, 2.0), instance_id="cube")],
    )
    sensor = SensorConfig(beam_count=128, elevation_min=-12.0, elevation_max=4.0, azimuth_steps=3600, range_noise_sigma=noise)
    return cfg, sensor


def speed_suite_fixture(seed: int = 0, duration_frames: int = 6, max_speed: float = 30.0) -> tuple[SceneConfig, SensorConfig]:
    """Compact boxes around a parked sensor with speeds spread evenly from
    2 m/s to ``max_speed`` (urban to highway traffic), for frame-rate ablations.

    Boxes start about 25 m out on separate bearings and head away from the
    sensor within 60 degrees of the radial direction, so they neither occlude
    nor approach each other.
    """
    rng = np.random.default_rng(seed)
    speeds = rng.permutation(np.linspace(2.0, max_speed, 8))
    objects = []
    for k, v in enumerate(speeds):
        bearing = k * math.pi / 4 + rng.uniform(-0.2, 0.2)
        rad = rng.uniform(22.0, 28.0)
        side = rng.uniform(2.0, 3.0, size=3)
        objects.append(
            ObjectSpec(
                "car",
                float(rad * math.cos(bearing)),
                float(rad * math.sin(bearing)),
                yaw=float(bearing + rng.uniform(-math.pi / 3, math.pi / 3)),
                speed=float(v),
                size=tuple(float(x) for x in side),
                instance_id=f"box{k}",
            )
        )
    cfg = SceneConfig(seed=seed, duration_frames=duration_frames, frame_hz=10.0, objects=objects)
    sensor = SensorConfig(beam_count=128, elevation_min=-12.0, elevation_max=4.0, azimuth_steps=3600)
    return cfg, sensor
