"""Slow, loop-based reference implementations of the metrics."""

import math


def _categories(meta, i, thr):
    fg = meta.coarse_class[i] >= 0
    dyn = meta.gt_speed[i] >= thr
    if meta.is_ground[i]:
        return None
    if fg:
        return "FD" if dyn else "FS"
    return None if dyn else "BS"


def _bucket(speed, edges):
    for k in range(len(edges) - 1):
        if edges[k] <= speed < edges[k + 1]:
            return k
    return None


def oracle_report(pred, gt, meta, edges=(0.0, 0.5, 1.0, 2.0, math.inf), thr=0.05, aggregation="per_class", pred_class=None):
    n = len(meta)
    epe = {}
    cells = {}
    conf = {}
    for i in range(n):
        if not (pred.valid[i] and gt.valid[i]):
            continue
        cat = _categories(meta, i, thr)
        if cat is None:
            continue
        d = math.sqrt(sum((float(pred.vectors[i][k]) - float(gt.vectors[i][k])) ** 2 for k in range(3)))
        epe.setdefault(cat, []).append(d)
        c = int(meta.coarse_class[i])
        if c < 0:
            continue
        s = float(meta.gt_speed[i])
        cell = cells.setdefault((c, _bucket(s, edges)), [[], []])
        cell[0].append(d)
        cell[1].append(s)
        if pred_class is not None:
            key = (c, int(pred_class[i]))
            conf[key] = conf.get(key, 0) + 1

    threeway = {k: 100.0 * math.fsum(v) / len(v) for k, v in epe.items()}
    if threeway:
        threeway["mean"] = math.fsum(threeway.values()) / len(threeway)

    normalized = {}
    for (c, b), (es, ss) in cells.items():
        if math.fsum(ss) / len(ss) >= thr:
            normalized[(c, b)] = math.fsum(es) / math.fsum(ss)
    per_class = {}
    for (c, _), v in normalized.items():
        per_class.setdefault(c, []).append(v)
    pcd = {c: math.fsum(v) / len(v) for c, v in per_class.items()}
    if not pcd:
        dyn = None
    elif aggregation == "pooled":
        dyn = math.fsum(normalized.values()) / len(normalized)
    else:
        dyn = math.fsum(pcd.values()) / len(pcd)

    sem = None
    if conf:
        classes = sorted({c for c, _ in conf})
        ious = {}
        for c in classes:
            tp = conf.get((c, c), 0)
            gt_n = sum(v for (g, _), v in conf.items() if g == c)
            pr_n = sum(v for (_, p), v in conf.items() if p == c)
            ious[c] = tp / (gt_n + pr_n - tp)
        total = sum(conf.values())
        sem = {"miou": sum(ious.values()) / len(ious), "accuracy": sum(conf.get((c, c), 0) for c in range(4)) / total, "iou": ious}
    return {"threeway": threeway, "normalized": normalized, "per_class": pcd, "dynamic_mean": dyn, "semantic": sem}


def close(a, b, tol=1e-9):
    if a is None or b is None:
        return a is b
    return abs(a - b) <= tol * max(1.0, abs(b))


def compare(report, oracle, tol=1e-9):
    """List of mismatch descriptions between a MetricReport and an oracle dict."""
    from flowbench.metrics import CLASS_NAMES

    bad = []
    tw = report.threeway_cm()
    if set(tw) != set(oracle["threeway"]):
        bad.append(f"threeway keys {sorted(tw)} != {sorted(oracle['threeway'])}")
    for k, v in oracle["threeway"].items():
        if k in tw and not close(tw[k], v, tol):
            bad.append(f"threeway {k}: {tw[k]} != {v}")
    table = {k: row.get("normalized_epe") for k, row in report.bucket_table().items()}
    table = {k: v for k, v in table.items() if v is not None}
    if set(table) != set(oracle["normalized"]):
        bad.append("normalized cells differ")
    for k, v in oracle["normalized"].items():
        if k in table and not close(table[k], v, tol):
            bad.append(f"cell {k}: {table[k]} != {v}")
    pcd = report.per_class_dynamic
    for c, v in oracle["per_class"].items():
        if not close(pcd.get(CLASS_NAMES[c]), v, tol):
            bad.append(f"class {c}: {pcd.get(CLASS_NAMES[c])} != {v}")
    if not close(report.dynamic_mean, oracle["dynamic_mean"], tol):
        bad.append(f"dynamic mean {report.dynamic_mean} != {oracle['dynamic_mean']}")
    if oracle["semantic"] is not None:
        sem = report.semantic()
        if not close(sem["miou"], oracle["semantic"]["miou"], tol) or not close(sem["accuracy"], oracle["semantic"]["accuracy"], tol):
            bad.append("semantic differs")
    return bad


def oracle_range(pred, gt, meta, range_edges=(0.0, 35.0, 50.0, 75.0, 100.0, math.inf), aggregation="per_class"):
    """Dynamic mean per range bucket label, recomputed on each bucket's points."""
    from flowbench.metrics import RangeBuckets

    labels = RangeBuckets(range_edges).labels
    out = {}
    for k, label in enumerate(labels):
        lo, hi = range_edges[k], range_edges[k + 1]
        sel = [i for i in range(len(meta)) if lo <= float(meta.range_m[i]) < hi]
        if not sel:
            continue
        dm = oracle_report(pred.select(sel), gt.select(sel), meta.select(sel), aggregation=aggregation)["dynamic_mean"]
        if dm is not None:
            out[label] = dm
    return out
