"""Evaluation over a manifest: load pairs, remove ground, predict, score, merge."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines, groundseg, io, metrics
from .core import FlowField, FramePair
from .errors import InvalidConfig
from .unify import DatasetManifest, PairRef, TaxonomyMap, default_taxonomy, load_pair


@dataclass(frozen=True)
class EvalOptions:
    pred: str = "ego"  # ego | icp | dir:PATH
    metric: metrics.MetricConfig = field(default_factory=metrics.MetricConfig)
    ground_remove: bool = True
    ground: groundseg.GroundParams = field(default_factory=groundseg.GroundParams)
    icp: baselines.IcpParams = field(default_factory=baselines.IcpParams)
    taxonomy: str | None = None  # path; packaged default when None

    def __post_init__(self):
        if self.pred not in ("ego", "icp") and not self.pred.startswith("dir:"):
            raise InvalidConfig(f"--pred must be ego, icp or dir:PATH, got {self.pred!r}")


def prediction_path(root, ref: PairRef) -> Path:
    """Where a ``dir:`` predictor keeps the flow for one pair."""
    return Path(root) / ref.dataset_id / ref.sequence_id / f"{io.frame_name(ref.first)}.uflo"


def _taxonomy(opts: EvalOptions) -> TaxonomyMap:
    return TaxonomyMap.load(opts.taxonomy) if opts.taxonomy else default_taxonomy()


def prepare_pair(manifest: DatasetManifest, ref: PairRef, opts: EvalOptions, taxonomy: TaxonomyMap):
    """Load a pair with ground truth; returns ``(pair, ground_first, ground_second)``."""
    pair = load_pair(manifest, ref, taxonomy)
    if opts.ground_remove:
        g1 = groundseg.segment_ground(pair.first, opts.ground)
        g2 = groundseg.segment_ground(pair.second, opts.ground)
    else:
        g1 = np.zeros(len(pair.first), dtype=bool)
        g2 = np.zeros(len(pair.second), dtype=bool)
    return pair.with_ground_truth(g1), g1, g2


def predict(pair: FramePair, ref: PairRef, opts: EvalOptions, g1=None, g2=None) -> FlowField:
    if opts.pred == "ego":
        return baselines.ego_flow_baseline(pair)
    if opts.pred == "icp":
        return baselines.cluster_icp_flow(pair, opts.icp, g1, g2)
    return baselines.load_predictions(prediction_path(opts.pred[4:], ref), pair)


def evaluate_refs(manifest: DatasetManifest, refs, opts: EvalOptions) -> metrics.MetricReport:
    taxonomy = _taxonomy(opts)
    report = metrics.MetricReport(opts.metric)
    for ref in refs:
        pair, g1, g2 = prepare_pair(manifest, ref, opts, taxonomy)
        flow = predict(pair, ref, opts, g1, g2)
        report = report.merge(metrics.evaluate_pair(flow, pair.gt_flow, pair.meta, opts.metric))
    return report


def _shard_job(args):
    manifest_dict, refs, opts = args
    return evaluate_refs(DatasetManifest.from_dict(manifest_dict), [PairRef(*r) for r in refs], opts)


def split_shards(items: list, n: int) -> list[list]:
    """``n`` contiguous, near-equal chunks (some may be empty)."""
    bounds = np.linspace(0, len(items), n + 1).round().astype(int)
    return [items[bounds[i] : bounds[i + 1]] for i in range(n)]


def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get("FLOWBENCH_JOBS", "1")))
    except ValueError as exc:
        raise InvalidConfig("FLOWBENCH_JOBS must be an integer") from exc


def evaluate_manifest(
    manifest: DatasetManifest,
    opts: EvalOptions,
    shards: int = 1,
    jobs: int | None = None,
    limit: int | None = None,
) -> metrics.MetricReport:
    """Score every pair of ``manifest``; the result does not depend on
    ``shards`` or ``jobs``."""
    if shards < 1:
        raise InvalidConfig("shards must be >= 1")
    jobs = default_jobs() if jobs is None else jobs
    if jobs < 1:
        raise InvalidConfig("jobs must be >= 1")
    refs = manifest.pairs()
    if limit is not None:
        refs = refs[:limit]
    parts = split_shards(refs, shards)
    if jobs == 1:
        reports = [evaluate_refs(manifest, part, opts) for part in parts]
    else:
        payload = manifest.to_dict()
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(_shard_job, [(payload, [tuple(r) for r in part], opts) for part in parts]))
    return metrics.aggregate_reports(reports, opts.metric)


def report_json(report: metrics.MetricReport, opts: EvalOptions) -> dict:
    out = report.to_dict()
    out["predictor"] = opts.pred
    out["ground_removal"] = opts.ground_remove
    return out


def write_predictions(manifest: DatasetManifest, opts: EvalOptions, out_root, limit: int | None = None) -> int:
    """Run a built-in predictor over the manifest and store its flow files."""
    taxonomy = _taxonomy(opts)
    refs = manifest.pairs()[:limit] if limit is not None else manifest.pairs()
    for ref in refs:
        pair, g1, g2 = prepare_pair(manifest, ref, opts, taxonomy)
        path = prediction_path(out_root, ref)
        path.parent.mkdir(parents=True, exist_ok=True)
        io.write_flow(path, predict(pair, ref, opts, g1, g2))
    return len(refs)


def manifest_velocity_histogram(manifest: DatasetManifest, bin_width: float, opts: EvalOptions, limit: int | None = None) -> metrics.VelocityHistogram:
    taxonomy = _taxonomy(opts)
    refs = manifest.pairs()[:limit] if limit is not None else manifest.pairs()
    hist = metrics.VelocityHistogram(float(bin_width), np.zeros(0, dtype=np.int64))
    for ref in refs:
        pair, _, _ = prepare_pair(manifest, ref, opts, taxonomy)
        hist = hist.add(metrics.velocity_histogram(pair.meta, bin_width, opts.metric.speed.dynamic_threshold, pair.gt_flow.valid))
    return hist
