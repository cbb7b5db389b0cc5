"""Pair-level augmentations: height jitter, beam dropout, sparsification and
velocity augmentation by frame-rate decimation.

Both sweeps of a pair always receive the same draw; otherwise the ground-truth
flow between them would no longer describe the data.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass

import numpy as np

from .core import FramePair, FrameSequence, PointCloud, Pose
from .errors import IncompatibleRate, InvalidConfig
from .unify import resample_sequence


class JitterSign(str, enum.Enum):
    POSITIVE_ONLY = "POSITIVE_ONLY"
    SYMMETRIC = "SYMMETRIC"


class DropParity(str, enum.Enum):
    EVEN = "EVEN"
    ODD = "ODD"
    RANDOM_PER_SWEEP = "RANDOM_PER_SWEEP"


@dataclass(frozen=True)
class AugmentConfig:
    height_jitter_prob: float = 0.8
    height_jitter_range: tuple = (0.5, 2.0)
    height_jitter_sign: JitterSign = JitterSign.POSITIVE_ONLY
    beam_dropout_prob: float = 0.35
    beam_dropout_parity: DropParity = DropParity.RANDOM_PER_SWEEP
    seed: int = 0

    def __post_init__(self):
        for name in ("height_jitter_prob", "beam_dropout_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidConfig(f"{name} must lie in [0, 1], got {v}")
        lo, hi = self.height_jitter_range
        if lo > hi:
            raise InvalidConfig("height_jitter_range must satisfy lo <= hi")
        object.__setattr__(self, "height_jitter_range", (float(lo), float(hi)))
        object.__setattr__(self, "height_jitter_sign", JitterSign(self.height_jitter_sign))
        object.__setattr__(self, "beam_dropout_parity", DropParity(self.beam_dropout_parity))


def pair_rng(seed: int, pair_key: str, stream: str) -> np.random.Generator:
    """Philox generator derived from (seed, pair identity, augmentation name).

    Each augmentation has its own stream, so applying them in any order yields
    identical draws.
    """
    digest = hashlib.sha256(f"{int(seed)}|{pair_key}|{stream}".encode()).digest()
    words = np.frombuffer(digest, dtype="<u4").tolist()
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def draw_height_offset(cfg: AugmentConfig, rng: np.random.Generator) -> float | None:
    """None when the jitter is not applied. Always consumes three draws."""
    apply, u, sign = rng.random(3)
    if apply >= cfg.height_jitter_prob:
        return None
    lo, hi = cfg.height_jitter_range
    offset = lo + (hi - lo) * u
    if cfg.height_jitter_sign is JitterSign.SYMMETRIC and sign < 0.5:
        offset = -offset
    return float(offset)


def _raise_cloud(cloud: PointCloud, offset: float) -> PointCloud:
    xyz = cloud.xyz.copy()
    xyz[:, 2] += offset
    # lower the sensor by the same amount so world coordinates do not move;
    # for yaw-only poses this touches only the z translation
    ego = cloud.ego_pose
    shifted = Pose(ego.rotation, ego.translation - ego.rotation @ np.array([0.0, 0.0, offset]))
    return cloud.replace(xyz=xyz, ego_pose=shifted)


def height_jitter(pair: FramePair, cfg: AugmentConfig, rng: np.random.Generator | None = None, offset: float | None = None) -> FramePair:
    """Add one shared z offset to every point of both sweeps.

    ``offset`` forces a value and skips the random draw. Ground-truth flow is
    unchanged because both frames move together.
    """
    if offset is None:
        rng = rng if rng is not None else pair_rng(cfg.seed, pair.key, "height_jitter")
        offset = draw_height_offset(cfg, rng)
        if offset is None:
            return pair
    return pair.replace(first=_raise_cloud(pair.first, offset), second=_raise_cloud(pair.second, offset))


def _kept_beam_count(beam_count: int, dropped: int) -> int:
    kept_parity = 1 - dropped
    return max(1, (beam_count + (1 - kept_parity)) // 2)


def drop_beam_parity(cloud: PointCloud, dropped: int) -> tuple[PointCloud, np.ndarray]:
    """Remove beams with ``beam_id % 2 == dropped`` and re-index the survivors
    to ``beam_id // 2``. Returns the new cloud and the keep mask."""
    keep = (cloud.beam_id % 2) != dropped
    out = cloud.replace(
        xyz=cloud.xyz[keep],
        beam_id=cloud.beam_id[keep] // 2,
        t_offset=cloud.t_offset[keep],
        beam_count=_kept_beam_count(cloud.beam_count, dropped),
    )
    return out, keep


def _drop_pair(pair: FramePair, dropped: int) -> FramePair:
    first, keep = drop_beam_parity(pair.first, dropped)
    second, _ = drop_beam_parity(pair.second, dropped)
    return pair.replace(
        first=first,
        second=second,
        gt_flow=None if pair.gt_flow is None else pair.gt_flow.select(keep),
        meta=None if pair.meta is None else pair.meta.select(keep),
    )


def beam_dropout(pair: FramePair, cfg: AugmentConfig, rng: np.random.Generator | None = None) -> FramePair:
    """With probability ``beam_dropout_prob`` drop every other beam in both sweeps."""
    rng = rng if rng is not None else pair_rng(cfg.seed, pair.key, "beam_dropout")
    apply, coin = rng.random(2)
    if apply >= cfg.beam_dropout_prob:
        return pair
    if cfg.beam_dropout_parity is DropParity.EVEN:
        dropped = 0
    elif cfg.beam_dropout_parity is DropParity.ODD:
        dropped = 1
    else:
        dropped = int(coin < 0.5)
    return _drop_pair(pair, dropped)


def sparsify(data):
    """Deterministic half-density version: odd beams removed, even beams kept.

    Accepts a PointCloud or a FramePair and returns the same type.
    """
    if isinstance(data, PointCloud):
        return drop_beam_parity(data, 1)[0]
    return _drop_pair(data, 1)


def augment_pair(pair: FramePair, cfg: AugmentConfig, jitter: bool = True, dropout: bool = True) -> FramePair:
    """Apply the enabled augmentations with seeds derived from ``(cfg.seed, pair.key)``."""
    if jitter:
        pair = height_jitter(pair, cfg, pair_rng(cfg.seed, pair.key, "height_jitter"))
    if dropout:
        pair = beam_dropout(pair, cfg, pair_rng(cfg.seed, pair.key, "beam_dropout"))
    return pair


def fast_dataset_id(dataset_id: str, k: int) -> str:
    return f"{dataset_id}-fast{k}"


def velocity_resample(seq: FrameSequence, k: int) -> FrameSequence:
    """Keep every k-th frame so each pair spans k original intervals; every
    dynamic object's per-pair displacement grows k-fold."""
    if int(k) != k or k < 2:
        raise IncompatibleRate(f"velocity factor must be an integer >= 2, got {k}")
    k = int(k)
    out = resample_sequence(seq, seq.native_hz / k)
    new_id = fast_dataset_id(seq.dataset_id, k)
    return out.replace(dataset_id=new_id, frames=tuple(f.replace(dataset_id=new_id) for f in out.frames))
