"""Dynamic voxelization and range extension of a fixed-size voxel grid.

A grid remembers the lattice ``anchor`` it was cut from. Extending a grid keeps
the anchor, so an in-range point's cell on the extended grid is its old cell
shifted by an integer offset, with no floating-point drift between the two.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .core import PointCloud
from .errors import InvalidGrid, MisalignedExtension, NotAnExtension, ShapeError

GRID_TOL = 1e-9


def _as_int(q: float, what: str, exc=InvalidGrid) -> int:
    r = round(q)
    if abs(q - r) > GRID_TOL * max(1.0, abs(q)):
        raise exc(f"{what} is not an integer multiple of the voxel size ({q!r} cells)")
    return int(r)


@dataclass(frozen=True)
class GridConfig:
    x_range: tuple
    y_range: tuple
    z_range: tuple
    voxel_size: tuple
    anchor: tuple | None = None  # lattice origin; defaults to the lower corner

    def __post_init__(self):
        ranges = []
        for name in ("x_range", "y_range", "z_range"):
            lo, hi = (float(v) for v in getattr(self, name))
            if not (math.isfinite(lo) and math.isfinite(hi)) or hi <= lo:
                raise InvalidGrid(f"{name} must be a finite [lo, hi] with lo < hi")
            ranges.append((lo, hi))
            object.__setattr__(self, name, (lo, hi))
        size = tuple(float(s) for s in self.voxel_size)
        if len(size) != 3 or not all(math.isfinite(s) and s > 0 for s in size):
            raise InvalidGrid("voxel_size must be three positive numbers")
        object.__setattr__(self, "voxel_size", size)
        anchor = tuple(lo for lo, _ in ranges) if self.anchor is None else tuple(float(a) for a in self.anchor)
        object.__setattr__(self, "anchor", anchor)
        for (lo, hi), s, a, ax in zip(ranges, size, anchor, "xyz"):
            _as_int((hi - lo) / s, f"{ax} extent")
            _as_int((lo - a) / s, f"{ax} lower bound relative to the anchor")

    @property
    def ranges(self) -> tuple:
        return (self.x_range, self.y_range, self.z_range)

    @property
    def lo(self) -> np.ndarray:
        return np.array([r[0] for r in self.ranges])

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(_as_int((hi - lo) / s, "extent") for (lo, hi), s in zip(self.ranges, self.voxel_size))

    @property
    def lo_cells(self) -> np.ndarray:
        """Lower bound in lattice cells from the anchor."""
        return np.array([_as_int((lo - a) / s, "lower bound") for (lo, _), s, a in zip(self.ranges, self.voxel_size, self.anchor)], dtype=np.int64)

    def to_dict(self) -> dict:
        return {
            "x_range": list(self.x_range),
            "y_range": list(self.y_range),
            "z_range": list(self.z_range),
            "voxel_size": list(self.voxel_size),
            "anchor": list(self.anchor),
            "dims": list(self.dims),
        }

    @classmethod
    def from_dict(cls, d: dict) -> GridConfig:
        try:
            g = cls(d["x_range"], d["y_range"], d["z_range"], d["voxel_size"], d.get("anchor"))
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidGrid(f"bad grid config: {exc}") from exc
        if "dims" in d and tuple(d["dims"]) != g.dims:
            raise InvalidGrid(f"dims {d['dims']} disagree with ranges and voxel size {list(g.dims)}")
        return g

    @classmethod
    def load(cls, path) -> GridConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))


def _snap_floor(q: np.ndarray) -> np.ndarray:
    # values within rounding noise of a cell boundary count as on it
    r = np.round(q)
    near = np.abs(q - r) <= GRID_TOL * np.maximum(1.0, np.abs(r))
    return np.where(near, r, np.floor(q)).astype(np.int64)


def voxel_indices(xyz: np.ndarray, grid: GridConfig) -> tuple[np.ndarray, np.ndarray]:
    """Integer cell per point and the in-range mask. Cells are half-open, so a
    point on the upper boundary is out of range."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    q = (xyz - np.asarray(grid.anchor)) / np.asarray(grid.voxel_size)
    idx = _snap_floor(q) - grid.lo_cells
    inside = np.all((idx >= 0) & (idx < np.asarray(grid.dims)), axis=1)
    return idx, inside


class Voxelization(NamedTuple):
    indices: np.ndarray  # (N, 3) cell per point, meaningful where in_range
    in_range: np.ndarray  # (N,) bool
    coords: np.ndarray  # (M, 3) occupied cells, lexicographic order
    point_lists: list  # M arrays of point indices, ascending
    voxel_of_point: np.ndarray  # (N,) row into coords, -1 when out of range


def voxelize(cloud, grid: GridConfig) -> Voxelization:
    """Dynamic voxelization: every in-range point lands in exactly one occupied cell."""
    xyz = cloud.xyz if isinstance(cloud, PointCloud) else cloud
    idx, inside = voxel_indices(xyz, grid)
    dx, dy, dz = grid.dims
    pts = np.flatnonzero(inside)
    lin = (idx[pts, 0] * dy + idx[pts, 1]) * dz + idx[pts, 2]
    cells, inverse = np.unique(lin, return_inverse=True)
    coords = np.stack([cells // (dy * dz), (cells // dz) % dy, cells % dz], axis=1)
    order = np.argsort(inverse, kind="stable")
    bounds = np.searchsorted(inverse[order], np.arange(len(cells) + 1))
    lists = [pts[order[bounds[i] : bounds[i + 1]]] for i in range(len(cells))]
    vop = np.full(len(inside), -1, dtype=np.int64)
    vop[pts] = inverse
    return Voxelization(idx, inside, coords.astype(np.int64), lists, vop)


def extend_grid(old: GridConfig, new_ranges) -> tuple[GridConfig, tuple[int, int, int]]:
    """Grow the covered volume with the voxel size fixed.

    ``new_ranges`` is three ``[lo, hi]`` pairs (or a dict with x/y/z_range).
    Returns the new grid and the offset with ``new_index = old_index + offset``.
    """
    if isinstance(new_ranges, dict):
        new_ranges = (new_ranges["x_range"], new_ranges["y_range"], new_ranges["z_range"])
    new_ranges = [tuple(float(v) for v in r) for r in new_ranges]
    if len(new_ranges) != 3:
        raise InvalidGrid("need three axis ranges")
    for (olo, ohi), (nlo, nhi), s, ax in zip(old.ranges, new_ranges, old.voxel_size, "xyz"):
        if nlo > olo or nhi < ohi:
            raise NotAnExtension(f"{ax} range [{nlo}, {nhi}] does not contain [{olo}, {ohi}]")
        _as_int((olo - nlo) / s, f"{ax} lower shift", MisalignedExtension)
        _as_int((nhi - ohi) / s, f"{ax} upper shift", MisalignedExtension)
    new = GridConfig(*new_ranges, voxel_size=old.voxel_size, anchor=old.anchor)
    return new, grid_offset(old, new)


def grid_offset(old: GridConfig, new: GridConfig) -> tuple[int, int, int]:
    """Index offset between a grid and one of its extensions."""
    if new.voxel_size != old.voxel_size or new.anchor != old.anchor:
        raise NotAnExtension("grids do not share voxel size and lattice anchor")
    off = old.lo_cells - new.lo_cells
    end = off + np.asarray(old.dims)
    if np.any(off < 0) or np.any(end > np.asarray(new.dims)):
        raise NotAnExtension("new grid does not contain the old grid")
    return tuple(int(v) for v in off)


def transfer_grid_buffer(buffer, old: GridConfig, new: GridConfig, fill_value=0):
    """Re-key a grid-indexed buffer from ``old`` to its extension ``new``.

    Dense arrays must have leading shape ``old.dims``; trailing axes are kept.
    Dicts keyed by ``(i, j, k)`` are sparse: only copied cells appear, all
    other cells implicitly hold ``fill_value``.
    """
    off = grid_offset(old, new)
    if isinstance(buffer, dict):
        out = {}
        for key, val in buffer.items():
            k = tuple(int(v) for v in key)
            if len(k) != 3 or any(not 0 <= a < d for a, d in zip(k, old.dims)):
                raise ShapeError(f"buffer key {key} lies outside the old grid {old.dims}")
            out[(k[0] + off[0], k[1] + off[1], k[2] + off[2])] = val
        return out
    buf = np.asarray(buffer)
    if buf.shape[:3] != tuple(old.dims):
        raise ShapeError(f"buffer shape {buf.shape} does not start with grid dims {old.dims}")
    out = np.full(tuple(new.dims) + buf.shape[3:], fill_value, dtype=buf.dtype)
    dx, dy, dz = old.dims
    out[off[0] : off[0] + dx, off[1] : off[1] + dy, off[2] : off[2] + dz] = buf
    return out
