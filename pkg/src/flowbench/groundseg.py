"""LineFit ground segmentation (polar sectors, piecewise (range, z) lines)."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core import PointCloud
from .errors import EmptyInput, InvalidConfig


@dataclass(frozen=True)
class GroundParams:
    n_segments: int = 180
    n_bins: int = 120
    max_slope: float = 0.30
    max_fit_error: float = 0.05
    sensor_height: float = 1.8
    dist_threshold: float = 0.08
    max_range: float = 100.0
    # largest vertical jump between the previous ground line and the first
    # prototype of a new line
    max_start_height: float = 0.20

    def __post_init__(self):
        if self.n_segments < 4 or self.n_bins < 2:
            raise InvalidConfig("need n_segments >= 4 and n_bins >= 2")
        for name in ("max_slope", "max_fit_error", "dist_threshold", "max_range", "max_start_height"):
            if not getattr(self, name) > 0:
                raise InvalidConfig(f"{name} must be positive")

    @classmethod
    def load(cls, path) -> GroundParams:
        return cls(**json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


class _Fit:
    """Running least-squares line z = m r + b."""

    __slots__ = ("n", "sr", "sz", "srr", "srz", "szz", "r0", "z0", "r1")

    def __init__(self):
        self.n = 0
        self.sr = self.sz = self.srr = self.srz = self.szz = 0.0

    def add(self, r: float, z: float) -> None:
        if self.n == 0:
            self.r0, self.z0 = r, z
        self.r1 = r
        self.n += 1
        self.sr += r
        self.sz += z
        self.srr += r * r
        self.srz += r * z
        self.szz += z * z

    def copy(self) -> _Fit:
        f = _Fit.__new__(_Fit)
        for k in _Fit.__slots__:
            if hasattr(self, k):
                setattr(f, k, getattr(self, k))
        return f

    def solve(self) -> tuple[float, float, float]:
        """Slope, intercept and RMS residual."""
        n = self.n
        det = n * self.srr - self.sr * self.sr
        if det <= 1e-12 * max(1.0, n * self.srr):
            return 0.0, self.sz / n, self.rms(0.0, self.sz / n)
        m = (n * self.srz - self.sr * self.sz) / det
        b = (self.sz - m * self.sr) / n
        return m, b, self.rms(m, b)

    def rms(self, m: float, b: float) -> float:
        """RMS vertical residual of the accumulated points about z = m r + b."""
        sse = self.szz - 2 * m * self.srz - 2 * b * self.sz + m * m * self.srr + 2 * m * b * self.sr + self.n * b * b
        return math.sqrt(max(sse, 0.0) / self.n)


def _fit_sector(r: np.ndarray, z: np.ndarray, p: GroundParams) -> list[tuple[float, float, float, float]]:
    """Greedy piecewise line fit over one sector's prototypes sorted by range.

    Returns ``(r_start, r_end, slope, intercept)`` tuples. A fit spanning less
    than two radial bins with only two prototypes is too short to trust its
    slope; it keeps the slope of the previous line (or, for the first line,
    pivots on the ego footprint at ``-sensor_height``) and only fits the offset.
    """
    min_span = 2.0 * p.max_range / p.n_bins
    lines = []
    prev_m, prev_b = 0.0, -p.sensor_height
    cur: _Fit | None = None

    def line_of(fit: _Fit) -> tuple[float, float, float]:
        if fit.n >= 3 or (fit.n == 2 and fit.r1 - fit.r0 >= min_span):
            return fit.solve()
        rc, zc = fit.sr / fit.n, fit.sz / fit.n
        m = prev_m
        if not lines and rc > 0:
            # first line: pivot on the ego footprint, which sits on the ground
            m = min(max((zc + p.sensor_height) / rc, -p.max_slope), p.max_slope)
        b = zc - m * rc
        return m, b, fit.rms(m, b)

    for ri, zi in zip(r.tolist(), z.tolist()):
        if cur is not None:
            m, b, _ = line_of(cur)
            trial = cur.copy()
            trial.add(ri, zi)
            tm, _, rms = line_of(trial)
            if abs(zi - (m * ri + b)) <= p.dist_threshold and abs(tm) <= p.max_slope and rms <= p.max_fit_error:
                cur = trial
                continue
            lines.append((cur.r0, cur.r1, m, b))
            prev_m, prev_b = m, b
            cur = None
        # before any line exists the ground may rise or fall at up to max_slope
        # from the sensor footprint
        gate = p.max_start_height + (p.max_slope * ri if not lines else 0.0)
        if abs(zi - (prev_m * ri + prev_b)) <= gate:
            cur = _Fit()
            cur.add(ri, zi)
    if cur is not None:
        m, b, _ = line_of(cur)
        lines.append((cur.r0, cur.r1, m, b))
    return lines


def _line_height(lines, r: np.ndarray, p: GroundParams) -> np.ndarray:
    if not lines:
        return np.full_like(r, -p.sensor_height)
    arr = np.asarray(lines)
    starts = arr[:, 0]
    # the last line starting at or before r; points before the first line use it too
    idx = np.clip(np.searchsorted(starts, r, side="right") - 1, 0, len(arr) - 1)
    return arr[idx, 2] * r + arr[idx, 3]


def segment_ground(cloud: PointCloud, params: GroundParams | None = None) -> np.ndarray:
    """Boolean mask, True for ground points."""
    p = params or GroundParams()
    xyz = cloud.xyz if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if len(xyz) == 0:
        raise EmptyInput("cannot segment ground of an empty cloud")
    x, y, z = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    r = np.hypot(x, y)
    width = 2 * math.pi / p.n_segments
    sector = np.minimum(((np.arctan2(y, x) + math.pi) // width).astype(np.int64), p.n_segments - 1)
    bin_w = p.max_range / p.n_bins
    rbin = np.floor(r / bin_w).astype(np.int64)
    in_range = rbin < p.n_bins

    # prototype = lowest point per (sector, bin)
    cand = np.flatnonzero(in_range)
    key = sector[cand] * p.n_bins + rbin[cand]
    order = np.lexsort((z[cand], key))
    key_sorted = key[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = key_sorted[1:] != key_sorted[:-1]
    protos = cand[order[first]]
    proto_sector = sector[protos]

    sector_lines: list[list] = [[] for _ in range(p.n_segments)]
    bounds = np.searchsorted(proto_sector, np.arange(p.n_segments + 1))
    for s in range(p.n_segments):
        idx = protos[bounds[s] : bounds[s + 1]]
        if len(idx):
            sector_lines[s] = _fit_sector(r[idx], z[idx], p)

    # empty sectors borrow the lines of the nearest non-empty sector
    filled = [s for s in range(p.n_segments) if sector_lines[s]]
    if filled:
        filled_arr = np.array(filled)
        for s in range(p.n_segments):
            if not sector_lines[s]:
                d = np.abs(filled_arr - s)
                d = np.minimum(d, p.n_segments - d)
                sector_lines[s] = sector_lines[int(filled_arr[np.argmin(d)])]

    mask = np.zeros(len(xyz), dtype=bool)
    by_sector = np.argsort(sector, kind="stable")
    sb = np.searchsorted(sector[by_sector], np.arange(p.n_segments + 1))
    for s in range(p.n_segments):
        idx = by_sector[sb[s] : sb[s + 1]]
        if len(idx):
            mask[idx] = np.abs(z[idx] - _line_height(sector_lines[s], r[idx], p)) <= p.dist_threshold
    return mask


def remove_ground(cloud: PointCloud, params: GroundParams | None = None) -> PointCloud:
    return cloud.select(~segment_ground(cloud, params))
