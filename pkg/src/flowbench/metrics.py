"""Scene flow evaluation: three-way EPE, bucket-normalized EPE, range buckets,
semantic scores and velocity histograms.

Per-pair results are kept as exact sufficient statistics (sums stored as
``Fraction``), so merging reports is associative and commutative bit for bit
and a sharded evaluation reproduces a single pass exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .core import BACKGROUND, CoarseClass, FlowField, PointMeta
from .errors import ConfigMismatch, InvalidConfig, InvalidSpeed, ShapeError

FD, FS, BS, EXCLUDED = 0, 1, 2, -1
CATEGORY_NAMES = ("FD", "FS", "BS")
CLASS_NAMES = tuple(c.name for c in CoarseClass)
N_CLASSES = len(CLASS_NAMES)
AGGREGATIONS = ("per_class", "pooled")


def _edge_label(lo: float, hi: float) -> str:
    return f"[{lo!r}, {'inf' if math.isinf(hi) else repr(hi)})"


def _check_edges(edges: Sequence[float], start_zero: bool) -> tuple[float, ...]:
    e = tuple(float(x) for x in edges)
    if len(e) < 2 or any(b <= a for a, b in zip(e, e[1:])) or any(math.isnan(x) for x in e):
        raise InvalidConfig(f"bucket edges must be strictly increasing, got {list(edges)}")
    if start_zero and e[0] != 0.0:
        raise InvalidConfig("speed bucket edges must start at 0")
    return e


@dataclass(frozen=True)
class SpeedBuckets:
    """Half-open speed intervals in m/frame."""

    edges: tuple = (0.0, 0.5, 1.0, 2.0, math.inf)
    dynamic_threshold: float = 0.05

    def __post_init__(self):
        e = _check_edges(self.edges, start_zero=True)
        object.__setattr__(self, "edges", e)
        if not 0.0 <= self.dynamic_threshold < e[1]:
            raise InvalidConfig("dynamic_threshold must lie below the first nonzero edge")
        object.__setattr__(self, "dynamic_threshold", float(self.dynamic_threshold))

    @property
    def n(self) -> int:
        return len(self.edges) - 1

    @property
    def labels(self) -> list[str]:
        return [_edge_label(a, b) for a, b in zip(self.edges, self.edges[1:])]

    def index(self, speed: np.ndarray) -> np.ndarray:
        """Bucket index per speed; speeds at or past the last finite edge land in
        the last bucket when it is unbounded, otherwise -1."""
        s = np.asarray(speed, dtype=np.float64)
        idx = np.searchsorted(np.asarray(self.edges), s, side="right") - 1
        idx[(idx >= self.n) | (s < 0)] = -1
        return idx


@dataclass(frozen=True)
class RangeBuckets:
    edges: tuple = (0.0, 35.0, 50.0, 75.0, 100.0, math.inf)

    def __post_init__(self):
        object.__setattr__(self, "edges", _check_edges(self.edges, start_zero=False))

    @property
    def n(self) -> int:
        return len(self.edges) - 1

    @property
    def labels(self) -> list[str]:
        return [_edge_label(a, b) for a, b in zip(self.edges, self.edges[1:])]

    def index(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=np.float64)
        idx = np.searchsorted(np.asarray(self.edges), r, side="right") - 1
        idx[idx >= self.n] = -1
        return idx


@dataclass(frozen=True)
class MetricConfig:
    speed: SpeedBuckets = field(default_factory=SpeedBuckets)
    ranges: RangeBuckets = field(default_factory=RangeBuckets)
    aggregation: str = "per_class"

    def __post_init__(self):
        if self.aggregation not in AGGREGATIONS:
            raise InvalidConfig(f"aggregation must be one of {AGGREGATIONS}")

    def to_dict(self) -> dict:
        return {
            "speed_edges": [_json_float(x) for x in self.speed.edges],
            "dynamic_threshold": self.speed.dynamic_threshold,
            "range_edges": [_json_float(x) for x in self.ranges.edges],
            "aggregation": self.aggregation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> MetricConfig:
        def edges(xs):
            return tuple(math.inf if x == "inf" else float(x) for x in xs)

        return cls(
            SpeedBuckets(edges(d.get("speed_edges", SpeedBuckets.edges)), d.get("dynamic_threshold", 0.05)),
            RangeBuckets(edges(d.get("range_edges", RangeBuckets.edges))),
            d.get("aggregation", "per_class"),
        )


def _json_float(x: float):
    return "inf" if math.isinf(x) else x


def speed_bucket_of(speed: float, buckets: SpeedBuckets | None = None) -> int:
    b = buckets or SpeedBuckets()
    s = float(speed)
    if math.isnan(s) or s < 0:
        raise InvalidSpeed(f"speed must be non-negative, got {speed}")
    idx = int(b.index(np.array([s]))[0])
    if idx < 0:
        raise InvalidSpeed(f"speed {s} lies beyond the last bucket edge")
    return idx


def classify_points(meta: PointMeta, threshold: float = 0.05) -> np.ndarray:
    """FD/FS/BS code per point; background-dynamic and ground points get EXCLUDED."""
    fg = meta.coarse_class != BACKGROUND
    dyn = meta.gt_speed >= threshold
    cat = np.full(len(meta), EXCLUDED, dtype=np.int8)
    cat[fg & dyn] = FD
    cat[fg & ~dyn] = FS
    cat[~fg & ~dyn] = BS
    cat[meta.is_ground] = EXCLUDED
    return cat


def _check_lengths(*arrays) -> None:
    n = {len(a) for a in arrays}
    if len(n) != 1:
        raise ShapeError(f"length mismatch between inputs: {sorted(n)}")


def _epe(pred: FlowField, gt: FlowField) -> np.ndarray:
    return np.linalg.norm(pred.vectors - gt.vectors, axis=1)


def _fsum_groups(keys: np.ndarray, n_keys: int, *weights: np.ndarray) -> dict[int, list]:
    """{key: [Fraction(sum w) for each w..., count]} over populated keys."""
    counts = np.bincount(keys, minlength=n_keys)
    sums = [np.bincount(keys, weights=w, minlength=n_keys) for w in weights]
    out = {}
    for k in np.flatnonzero(counts).tolist():
        out[k] = [Fraction(float(s[k])) for s in sums] + [int(counts[k])]
    return out


def _merge_into(dst: dict, src: dict) -> None:
    for k, v in src.items():
        cur = dst.get(k)
        dst[k] = list(v) if cur is None else [a + b for a, b in zip(cur, v)]


@dataclass(eq=False)
class MetricReport:
    """Mergeable evaluation state. Derived metrics are computed on demand."""

    config: MetricConfig = field(default_factory=MetricConfig)
    threeway: dict = field(default_factory=dict)  # category -> [sum_epe, n]
    buckets: dict = field(default_factory=dict)  # (class, bucket) -> [sum_epe, sum_speed, n]
    ranges: dict = field(default_factory=dict)  # (range, class, bucket) -> [sum_epe, sum_speed, n]
    confusion: np.ndarray = field(default_factory=lambda: np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64))
    counts: dict = field(default_factory=lambda: {"pairs": 0, "points": 0, "evaluated": 0, "invalid": 0, "ground": 0, "background_dynamic": 0})

    # -- merging -----------------------------------------------------------
    def merge(self, other: MetricReport) -> MetricReport:
        if self.config != other.config:
            raise ConfigMismatch("cannot merge reports with different bucket configurations")
        out = MetricReport(self.config)
        for a in (self, other):
            _merge_into(out.threeway, a.threeway)
            _merge_into(out.buckets, a.buckets)
            _merge_into(out.ranges, a.ranges)
            out.confusion += a.confusion
            for k, v in a.counts.items():
                out.counts[k] = out.counts.get(k, 0) + v
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, MetricReport):
            return NotImplemented
        return (
            self.config == other.config
            and self.threeway == other.threeway
            and self.buckets == other.buckets
            and self.ranges == other.ranges
            and np.array_equal(self.confusion, other.confusion)
            and self.counts == other.counts
        )

    # -- derived values ----------------------------------------------------
    def threeway_cm(self) -> dict[str, float]:
        out = {CATEGORY_NAMES[c]: 100.0 * float(s / n) for c, (s, n) in sorted(self.threeway.items())}
        if out:
            out["mean"] = math.fsum(out.values()) / len(out)
        return out

    def _table(self, cells: dict) -> dict:
        thr = Fraction(self.config.speed.dynamic_threshold)
        table = {}
        for (c, b), (se, ss, n) in sorted(cells.items()):
            row = {"count": n, "raw_epe_m": float(se / n), "mean_speed": float(ss / n)}
            if ss / n >= thr:
                row["normalized_epe"] = float(se / ss)
            table[(c, b)] = row
        return table

    def _dynamic(self, table: dict) -> tuple[float | None, dict[int, float]]:
        per_class: dict[int, list] = {}
        for (c, _), row in table.items():
            if "normalized_epe" in row:
                per_class.setdefault(c, []).append(row["normalized_epe"])
        pcd = {c: math.fsum(v) / len(v) for c, v in sorted(per_class.items())}
        if not pcd:
            return None, pcd
        if self.config.aggregation == "pooled":
            vals = [x for v in per_class.values() for x in v]
            return math.fsum(vals) / len(vals), pcd
        return math.fsum(pcd.values()) / len(pcd), pcd

    def bucket_table(self) -> dict:
        return self._table(self.buckets)

    @property
    def dynamic_mean(self) -> float | None:
        return self._dynamic(self.bucket_table())[0]

    @property
    def per_class_dynamic(self) -> dict[str, float]:
        return {CLASS_NAMES[c]: v for c, v in self._dynamic(self.bucket_table())[1].items()}

    def range_table(self) -> dict[str, float]:
        out = {}
        labels = self.config.ranges.labels
        for r in range(self.config.ranges.n):
            cells = {(c, b): v for (rr, c, b), v in self.ranges.items() if rr == r}
            dm = self._dynamic(self._table(cells))[0]
            if dm is not None:
                out[labels[r]] = dm
        return out

    def semantic(self) -> dict | None:
        if not self.confusion.any():
            return None
        return _semantic_from_confusion(self.confusion)

    def to_dict(self) -> dict:
        labels = self.config.speed.labels
        table = {}
        for (c, b), row in self.bucket_table().items():
            table.setdefault(CLASS_NAMES[c], {})[labels[b]] = row
        out = {
            "config": self.config.to_dict(),
            "counts": dict(sorted(self.counts.items())),
            "threeway_cm": self.threeway_cm(),
            "bucket_table": table,
            "dynamic_mean": self.dynamic_mean,
            "per_class_dynamic": self.per_class_dynamic,
            "range_table": self.range_table(),
        }
        sem = self.semantic()
        if sem is not None:
            out["semantic"] = sem
        return out

    def format_table(self) -> str:
        """Fixed-width text rendering of the report."""
        lines = []
        tw = self.threeway_cm()
        lines.append("Three-way EPE (cm)")
        lines.append("".join(f"{h:>10}" for h in ("Mean", "FD", "FS", "BS")))
        lines.append("".join(f"{_fmt(tw.get(k), 2):>10}" for k in ("mean", "FD", "FS", "BS")))
        lines.append("")
        dm = self.dynamic_mean
        lines.append(f"Dynamic Bucket-Normalized EPE  (dynamic mean {_fmt(dm, 3)})")
        labels = self.config.speed.labels
        lines.append(f"{'class':<12}{'dyn':>8}" + "".join(f"{lab:>14}" for lab in labels))
        table = self.bucket_table()
        pcd = self.per_class_dynamic
        for c, name in enumerate(CLASS_NAMES):
            cells = []
            for b in range(len(labels)):
                row = table.get((c, b))
                if row is None:
                    cells.append("-")
                elif b == 0 or "normalized_epe" not in row:
                    # the lowest bucket is shown as raw EPE in meters
                    cells.append(f"{row['raw_epe_m']:.3f}m")
                else:
                    cells.append(f"{row['normalized_epe']:.3f}")
            lines.append(f"{name:<12}{_fmt(pcd.get(name), 3):>8}" + "".join(f"{x:>14}" for x in cells))
        rt = self.range_table()
        if rt:
            lines.append("")
            lines.append("Dynamic mean by range (m)")
            lines.append("".join(f"{lab:>14}" for lab in self.config.ranges.labels))
            lines.append("".join(f"{_fmt(rt.get(lab), 3):>14}" for lab in self.config.ranges.labels))
        sem = self.semantic()
        if sem is not None:
            lines.append("")
            lines.append("Semantic classification")
            lines.append("".join(f"{h:>12}" for h in ("mIoU", "Accuracy", *CLASS_NAMES)))
            vals = [sem["miou"], sem["accuracy"], *(sem["per_class_iou"].get(n) for n in CLASS_NAMES)]
            lines.append("".join(f"{_fmt(v, 3):>12}" for v in vals))
        c = self.counts
        lines.append("")
        lines.append(f"pairs {c['pairs']}  points {c['points']}  evaluated {c['evaluated']}")
        return "\n".join(lines) + "\n"


def _fmt(v, digits: int) -> str:
    return "-" if v is None else f"{v:.{digits}f}"


def evaluate_pair(
    pred: FlowField,
    gt: FlowField,
    meta: PointMeta,
    config: MetricConfig | None = None,
    pred_class: np.ndarray | None = None,
) -> MetricReport:
    """Sufficient statistics of one frame pair."""
    cfg = config or MetricConfig()
    _check_lengths(pred.vectors, gt.vectors, meta.gt_speed)
    rep = MetricReport(cfg)
    n = len(meta)
    valid = pred.valid & gt.valid
    cat = classify_points(meta, cfg.speed.dynamic_threshold)
    fg = meta.coarse_class != BACKGROUND
    use = valid & ~meta.is_ground
    rep.counts.update(
        pairs=1,
        points=n,
        invalid=int(np.count_nonzero(~valid)),
        ground=int(np.count_nonzero(valid & meta.is_ground)),
        background_dynamic=int(np.count_nonzero(use & ~fg & (meta.gt_speed >= cfg.speed.dynamic_threshold))),
    )
    keep = use & (cat != EXCLUDED)
    rep.counts["evaluated"] = int(np.count_nonzero(keep))
    if not keep.any():
        return rep
    epe = _epe(pred, gt)

    rep.threeway = _fsum_groups(cat[keep].astype(np.int64), 3, epe[keep])

    fgk = keep & fg
    if fgk.any():
        b = cfg.speed.index(meta.gt_speed[fgk])
        c = meta.coarse_class[fgk].astype(np.int64)
        if np.any(b < 0):
            raise InvalidSpeed("ground-truth speed outside the configured buckets")
        nb = cfg.speed.n
        cell = c * nb + b
        for k, v in _fsum_groups(cell, N_CLASSES * nb, epe[fgk], meta.gt_speed[fgk]).items():
            rep.buckets[(k // nb, k % nb)] = v
        r = cfg.ranges.index(meta.range_m[fgk])
        inr = r >= 0
        ncell = N_CLASSES * nb
        for k, v in _fsum_groups(r[inr] * ncell + cell[inr], cfg.ranges.n * ncell, epe[fgk][inr], meta.gt_speed[fgk][inr]).items():
            rep.ranges[(k // ncell, (k % ncell) // nb, k % nb)] = v
        if pred_class is not None:
            pc = np.asarray(pred_class).reshape(-1)
            _check_lengths(pc, meta.gt_speed)
            rep.confusion = _confusion(pc[fgk], meta.coarse_class[fgk])
    return rep


def three_way_epe(pred: FlowField, gt: FlowField, categories: np.ndarray) -> dict[str, float]:
    """Mean EPE in cm per category present, plus their unweighted mean."""
    categories = np.asarray(categories)
    _check_lengths(pred.vectors, gt.vectors, categories)
    keep = pred.valid & gt.valid & (categories >= 0)
    rep = MetricReport()
    if keep.any():
        rep.threeway = _fsum_groups(categories[keep].astype(np.int64), 3, _epe(pred, gt)[keep])
    return rep.threeway_cm()


def bucket_normalized_epe(
    pred: FlowField,
    gt: FlowField,
    meta: PointMeta,
    buckets: SpeedBuckets | None = None,
    aggregation: str = "per_class",
) -> dict:
    """``{"bucket_table", "dynamic_mean", "per_class_dynamic"}``; bucket_table is
    keyed by ``(class name, bucket label)``."""
    cfg = MetricConfig(speed=buckets or SpeedBuckets(), aggregation=aggregation)
    rep = evaluate_pair(pred, gt, meta, cfg)
    labels = cfg.speed.labels
    return {
        "bucket_table": {(CLASS_NAMES[c], labels[b]): row for (c, b), row in rep.bucket_table().items()},
        "dynamic_mean": rep.dynamic_mean,
        "per_class_dynamic": rep.per_class_dynamic,
    }


def range_bucketed(
    pred: FlowField,
    gt: FlowField,
    meta: PointMeta,
    rb: RangeBuckets | None = None,
    buckets: SpeedBuckets | None = None,
    aggregation: str = "per_class",
) -> dict[str, float]:
    """Dynamic mean per range bucket; buckets with no dynamic cell are absent."""
    cfg = MetricConfig(speed=buckets or SpeedBuckets(), ranges=rb or RangeBuckets(), aggregation=aggregation)
    return evaluate_pair(pred, gt, meta, cfg).range_table()


def _confusion(pred_class: np.ndarray, gt_class: np.ndarray) -> np.ndarray:
    p = np.asarray(pred_class).astype(np.int64)
    g = np.asarray(gt_class).astype(np.int64)
    if p.size and (p.min() < 0 or p.max() >= N_CLASSES or g.min() < 0 or g.max() >= N_CLASSES):
        raise ShapeError(f"class labels must be coarse class codes 0..{N_CLASSES - 1}")
    return np.bincount(g * N_CLASSES + p, minlength=N_CLASSES * N_CLASSES).reshape(N_CLASSES, N_CLASSES)


def _semantic_from_confusion(cm: np.ndarray) -> dict:
    tp = np.diag(cm)
    gt_n = cm.sum(axis=1)
    pred_n = cm.sum(axis=0)
    per_class = {}
    for c in np.flatnonzero(gt_n).tolist():
        per_class[CLASS_NAMES[c]] = float(tp[c] / (gt_n[c] + pred_n[c] - tp[c]))
    total = int(cm.sum())
    return {
        "miou": math.fsum(per_class.values()) / len(per_class) if per_class else None,
        "accuracy": float(tp.sum() / total) if total else None,
        "per_class_iou": per_class,
    }


def semantic_metrics(pred_class: np.ndarray, gt_class: np.ndarray) -> dict:
    """IoU per class present in the ground truth, their mean, and accuracy."""
    _check_lengths(np.asarray(pred_class).reshape(-1), np.asarray(gt_class).reshape(-1))
    return _semantic_from_confusion(_confusion(np.asarray(pred_class).reshape(-1), np.asarray(gt_class).reshape(-1)))


def aggregate_reports(reports: Iterable[MetricReport], config: MetricConfig | None = None) -> MetricReport:
    reports = list(reports)
    out = MetricReport(config or (reports[0].config if reports else MetricConfig()))
    for r in reports:
        out = out.merge(r)
    return out


@dataclass
class VelocityHistogram:
    bin_width: float
    counts: np.ndarray  # counts[k] covers [k w, (k+1) w)

    @property
    def edges(self) -> np.ndarray:
        return np.arange(len(self.counts) + 1) * self.bin_width

    def add(self, other: VelocityHistogram) -> VelocityHistogram:
        if other.bin_width != self.bin_width:
            raise ConfigMismatch("histograms use different bin widths")
        n = max(len(self.counts), len(other.counts))
        c = np.zeros(n, dtype=np.int64)
        c[: len(self.counts)] += self.counts
        c[: len(other.counts)] += other.counts
        return VelocityHistogram(self.bin_width, c)

    def to_dict(self) -> dict:
        return {"bin_width": self.bin_width, "edges": self.edges.tolist() if len(self.counts) else [], "counts": self.counts.tolist()}

    def to_csv(self) -> str:
        rows = ["bin_lo,bin_hi,count"]
        e = self.edges
        for k, c in enumerate(self.counts.tolist()):
            rows.append(f"{e[k]:.6g},{e[k + 1]:.6g},{c}")
        return "\n".join(rows) + "\n"


def velocity_histogram(metas: PointMeta | Iterable[PointMeta], bin_width: float, threshold: float = 0.05, valid=None) -> VelocityHistogram:
    """Histogram of gt speed over non-ground foreground points with speed at or above ``threshold``.

    ``valid`` optionally gives a mask (or an iterable of masks) matching ``metas``.
    """
    if not bin_width > 0:
        raise InvalidConfig("bin_width must be positive")
    if isinstance(metas, PointMeta):
        metas = [metas]
        valid = None if valid is None else [valid]
    hist = VelocityHistogram(float(bin_width), np.zeros(0, dtype=np.int64))
    masks = iter(valid) if valid is not None else None
    for meta in metas:
        sel = (meta.coarse_class != BACKGROUND) & ~meta.is_ground & (meta.gt_speed >= threshold)
        if masks is not None:
            sel &= np.asarray(next(masks), dtype=bool)
        idx = np.floor(meta.gt_speed[sel] / bin_width).astype(np.int64)
        if len(idx):
            hist = hist.add(VelocityHistogram(hist.bin_width, np.bincount(idx)))
    return hist
