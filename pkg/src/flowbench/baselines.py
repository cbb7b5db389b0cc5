"""Reference flow estimators and loading of externally produced predictions."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from . import io
from .core import FlowField, FramePair, compensate_ego
from .errors import EmptyInput, InvalidConfig, ShapeError


@dataclass(frozen=True)
class IcpParams:
    cluster_voxel: float = 0.5
    min_cluster_points: int = 10
    max_icp_iters: int = 30
    icp_tol: float = 1e-4
    max_corr_dist: float = 2.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v > 0:
                raise InvalidConfig(f"{k} must be positive, got {v}")

    def to_dict(self) -> dict:
        return asdict(self)


def ego_flow_baseline(pair: FramePair) -> FlowField:
    """Static-world prediction: zero motion after ego compensation."""
    return FlowField.zeros(len(pair.first))


# the 13 neighbour offsets with a positive lexicographic sign; together with
# their negations they make up the 26-neighbourhood
_HALF_NEIGHBOURS = [
    (dx, dy, dz)
    for dx in (-1, 0, 1)
    for dy in (-1, 0, 1)
    for dz in (-1, 0, 1)
    if (dx, dy, dz) > (0, 0, 0)
]


def cluster_points(xyz: np.ndarray, voxel: float) -> np.ndarray:
    """Connected components of occupied cells under 26-connectivity; label per point."""
    if len(xyz) == 0:
        return np.zeros(0, dtype=np.int64)
    keys = np.floor(xyz / voxel).astype(np.int64)
    keys -= keys.min(axis=0) - 1  # one empty cell of margin on every side
    span = keys.max(axis=0) + 2
    lin = (keys[:, 0] * span[1] + keys[:, 1]) * span[2] + keys[:, 2]
    cells, point_cell = np.unique(lin, return_inverse=True)
    ck = np.stack([cells // (span[1] * span[2]), (cells // span[2]) % span[1], cells % span[2]], axis=1)
    rows, cols = [], []
    for d in _HALF_NEIGHBOURS:
        nb = ck + np.asarray(d)
        nlin = (nb[:, 0] * span[1] + nb[:, 1]) * span[2] + nb[:, 2]
        pos = np.searchsorted(cells, nlin)
        pos_c = np.minimum(pos, len(cells) - 1)
        hit = cells[pos_c] == nlin
        rows.append(np.flatnonzero(hit))
        cols.append(pos_c[hit])
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    graph = coo_matrix((np.ones(len(r), dtype=np.int8), (r, c)), shape=(len(cells), len(cells)))
    _, cell_label = connected_components(graph, directed=False)
    return cell_label[point_cell]


TRANSLATION_WARMUP = 3


def kabsch(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation and translation minimizing sum |R src + t - dst|^2."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R, cd - R @ cs


def icp(src: np.ndarray, tree: cKDTree, target: np.ndarray, params: IcpParams, warmup: int = TRANSLATION_WARMUP):
    """Point-to-point ICP from the identity.

    The first ``warmup`` iterations fit a translation only: rotations fitted
    to the poor correspondences of a far-off start tend to swing the cluster
    away. After that it stops once the mean correspondence distance changes by
    less than ``icp_tol``. Returns ``(R, t, converged)``.
    """
    R, t = np.eye(3), np.zeros(3)
    prev = np.inf
    for it in range(params.max_icp_iters):
        moved = src @ R.T + t
        dist, nn = tree.query(moved, distance_upper_bound=params.max_corr_dist)
        ok = np.isfinite(dist)
        if np.count_nonzero(ok) < 3:
            return R, t, False
        err = float(dist[ok].mean())
        if it >= warmup and abs(prev - err) < params.icp_tol:
            return R, t, True
        prev = err
        if it < warmup:
            dR, dt = np.eye(3), target[nn[ok]].mean(axis=0) - moved[ok].mean(axis=0)
        else:
            dR, dt = kabsch(moved[ok], target[nn[ok]])
        R, t = dR @ R, dR @ t + dt
    return R, t, False


def cluster_icp_flow(
    pair: FramePair,
    params: IcpParams | None = None,
    ground_first: np.ndarray | None = None,
    ground_second: np.ndarray | None = None,
) -> FlowField:
    """Rigid per-cluster flow by ICP against the ego-compensated second sweep.

    Ground masks mark points to leave out of clustering and matching; those
    points, small clusters and clusters whose ICP does not converge get zero flow.
    """
    p = params or IcpParams()
    n1 = len(pair.first)
    ng1 = np.ones(n1, dtype=bool) if ground_first is None else ~np.asarray(ground_first, dtype=bool)
    ng2 = np.ones(len(pair.second), dtype=bool) if ground_second is None else ~np.asarray(ground_second, dtype=bool)
    if len(ng1) != n1 or len(ng2) != len(pair.second):
        raise ShapeError("ground masks must match the sweeps they label")
    if not ng1.any():
        raise EmptyInput("first sweep has no non-ground points")
    flow = np.zeros((n1, 3))
    target = compensate_ego(pair).inverse().apply(pair.second.xyz[ng2])
    if len(target) == 0:
        return FlowField(flow, np.ones(n1, dtype=bool))
    tree = cKDTree(target)
    idx = np.flatnonzero(ng1)
    src_all = pair.first.xyz[idx]
    labels = cluster_points(src_all, p.cluster_voxel)
    order = np.argsort(labels, kind="stable")
    bounds = np.flatnonzero(np.diff(labels[order])) + 1
    for members in np.split(order, bounds):
        if len(members) < p.min_cluster_points:
            continue
        src = src_all[members]
        R, t, ok = icp(src, tree, target, p)
        if ok:
            flow[idx[members]] = src @ R.T + t - src
    return FlowField(flow, np.ones(n1, dtype=bool))


def load_predictions(path, pair: FramePair | int) -> FlowField:
    """Read a flow file and check it matches the first sweep of ``pair``."""
    flow = io.read_flow(path)
    n = pair if isinstance(pair, int) else len(pair.first)
    if len(flow) != n:
        raise ShapeError(f"{path}: {len(flow)} flow vectors for a sweep of {n} points")
    return flow
