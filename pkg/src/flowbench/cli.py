"""``flowbench`` command line: synth, manifest, augment, sample, predict,
evaluate, analyze and voxel."""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__, augment, evaluate, io, metrics, sampler, synth, unify, voxelgrid
from .baselines import IcpParams
from .errors import FlowbenchError, InvalidConfig
from .groundseg import GroundParams


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        parts = self.prog.split()
        _emit_error("usage_error", message, parts[1] if len(parts) > 1 else None)
        sys.exit(2)


def _emit_error(code: str, message: str, command: str | None) -> None:
    sys.stderr.write(json.dumps({"command": command, "error": code, "message": message}, sort_keys=True) + "\n")


def _float_or_inf(text: str) -> float:
    return math.inf if text.strip().lower() in ("inf", "+inf", "infinity") else float(text)


def _derive_seed(seed: int, *parts: int) -> int:
    return int(np.random.SeedSequence([int(seed) & (2**64 - 1), *parts]).generate_state(1, dtype=np.uint64)[0] >> 1)


# -- synth -----------------------------------------------------------------

_SCENE_FIELDS = set(synth.SceneConfig.__dataclass_fields__)
_PRESET_FRAMES = {"random": 2, "cube": 2, "ground": 1, "speed-suite": 6}


def _scene_from_config(cfg: dict) -> tuple[dict | None, dict | None]:
    """``(scene, sensor)`` dicts held by a synth config file, if any.

    A file is either ``{"scene": {...}, "sensor": {...}, <flags>...}`` or a
    bare SceneConfig object.
    """
    if "scene" in cfg or "sensor" in cfg:
        return cfg.get("scene"), cfg.get("sensor")
    if "objects" in cfg or "duration_frames" in cfg:
        return {k: v for k, v in cfg.items() if k in _SCENE_FIELDS}, None
    return None, None


def _preset_scene(args, i: int):
    seed = _derive_seed(args.seed, i)
    frames = args.frames or _PRESET_FRAMES[args.preset]
    noise = args.noise or 0.0
    if args.preset == "cube":
        return synth.cube_fixture(noise=noise, duration_frames=frames, seed=seed)
    if args.preset == "ground":
        return synth.ground_fixture(noise=noise, seed=seed)
    if args.preset == "speed-suite":
        return synth.speed_suite_fixture(seed=i + args.seed, duration_frames=frames)
    hz = args.native_hz or 10.0
    cfg = synth.random_scene_config(seed, n_objects=args.objects, duration_frames=frames, frame_hz=hz)
    return cfg, synth.SensorConfig(range_noise_sigma=noise)


def _config_scene(args, scene: dict, i: int, seed_given: bool):
    d = dict(scene)
    if args.frames is not None:
        d["duration_frames"] = args.frames
    if args.native_hz is not None:
        d["frame_hz"] = args.native_hz
    cfg = synth.SceneConfig.from_dict(d)
    base = args.seed if seed_given else cfg.seed
    cfg.seed = _derive_seed(base, i) if args.sequences > 1 else base
    return cfg


def cmd_synth(args) -> dict:
    out = Path(args.out)
    scene, sensor_d = _scene_from_config(_load_config(args.config) if args.config else {})
    seed_given = args.seed is not None
    taxonomy = unify.TaxonomyMap.load(args.taxonomy) if args.taxonomy else None
    args.seed = 0 if args.seed is None else args.seed
    hz = None
    for i in range(args.sequences):
        if scene is not None:
            cfg, sensor = _config_scene(args, scene, i, seed_given), synth.SensorConfig()
        else:
            cfg, sensor = _preset_scene(args, i)
        if sensor_d is not None:
            sensor = synth.SensorConfig.from_dict(sensor_d)
        if args.noise is not None:
            sensor.range_noise_sigma = args.noise
        seq = synth.synth_sequence(cfg, sensor, args.dataset_id, f"seq{i:03d}", annotation_every=args.annotation_every, taxonomy=taxonomy)
        io.write_sequence(out, seq)
        hz = cfg.frame_hz
    io.write_dataset_meta(out, args.dataset_id, float(hz), float(hz) / args.annotation_every)
    return {"dataset_id": args.dataset_id, "out": str(out), "sequences": args.sequences}


# -- manifest --------------------------------------------------------------


def cmd_manifest(args) -> dict:
    manifest = unify.build_manifest(args.root, target_hz=args.target_hz)
    if args.strategy:
        manifest = manifest.with_weights(sampler.resolve_weights(manifest, sampler.WeightStrategy.parse(args.strategy)))
    manifest.save(args.out)
    return {"out": args.out, "pairs": manifest.pair_counts(), "weights": manifest.weights}


# -- augment ---------------------------------------------------------------


def cmd_augment(args) -> dict:
    cfg = augment.AugmentConfig(
        height_jitter_prob=args.jitter_prob,
        height_jitter_range=tuple(args.jitter_range),
        height_jitter_sign=args.jitter_sign,
        beam_dropout_prob=args.dropout_prob,
        beam_dropout_parity=args.dropout_parity,
        seed=args.seed,
    )
    meta = io.read_dataset_meta(args.in_dir)
    native = float(meta["native_hz"])
    annotation_hz = float(meta["annotation_hz"])
    dataset_id = meta["dataset_id"]
    if args.velocity_factor:
        dataset_id = augment.fast_dataset_id(dataset_id, args.velocity_factor)
        native = native / args.velocity_factor
        annotation_hz = min(annotation_hz, native)
    pair_level = args.height_jitter or args.beam_dropout or args.sparsify
    out = Path(args.out)
    written = 0
    for sid in io.list_sequences(args.in_dir):
        seq = io.read_sequence(args.in_dir, sid)
        if args.velocity_factor:
            seq = augment.velocity_resample(seq, args.velocity_factor)
        if not pair_level:
            io.write_sequence(out, seq)
            written += 1
            continue
        # pair-level augmentation: each pair becomes its own two-frame sequence
        # so both sweeps carry the same draw
        for pair in unify.pair_annotated_frames(seq):
            if args.height_jitter:
                pair = augment.height_jitter(pair, cfg)
            if args.beam_dropout:
                pair = augment.beam_dropout(pair, cfg)
            if args.sparsify:
                pair = augment.sparsify(pair)
            a, b = pair.first.frame_index, pair.second.frame_index
            io.write_sequence(
                out,
                seq.replace(
                    sequence_id=f"{sid}-{io.frame_name(a)}",
                    frames=(pair.first, pair.second),
                    annotations={a: pair.annotations_first, b: pair.annotations_second},
                    annotated=(a,),
                ),
            )
            written += 1
    io.write_dataset_meta(out, dataset_id, native, annotation_hz)
    return {"dataset_id": dataset_id, "out": str(out), "sequences": written}


# -- sample ----------------------------------------------------------------


def cmd_sample(args) -> None:
    manifest = unify.DatasetManifest.load(args.manifest)
    weights = sampler.resolve_weights(manifest, sampler.WeightStrategy.parse(args.strategy))
    lines = [json.dumps(rec, sort_keys=True) for rec in sampler.sample_log(manifest, weights, args.seed, args.n)]
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return None


# -- evaluate / predict / analyze -------------------------------------------


def _eval_options(args) -> evaluate.EvalOptions:
    speed = metrics.SpeedBuckets(tuple(args.speed_edges), args.dynamic_threshold)
    ranges = metrics.RangeBuckets(tuple(args.range_edges))
    return evaluate.EvalOptions(
        pred=args.pred,
        metric=metrics.MetricConfig(speed, ranges, args.aggregation),
        ground_remove=args.ground_remove,
        ground=GroundParams.load(args.ground_params) if args.ground_params else GroundParams(),
        icp=IcpParams(**json.loads(Path(args.icp_params).read_text())) if args.icp_params else IcpParams(),
        taxonomy=args.taxonomy,
    )


def cmd_evaluate(args) -> None:
    opts = _eval_options(args)
    manifest = unify.DatasetManifest.load(args.manifest)
    report = evaluate.evaluate_manifest(manifest, opts, shards=args.shards, jobs=args.jobs, limit=args.limit)
    io.write_json(args.out, evaluate.report_json(report, opts))
    table = report.format_table()
    if args.table:
        Path(args.table).write_text(table)
    else:
        sys.stdout.write(table)
    return None


def cmd_predict(args) -> dict:
    opts = _eval_options(args)
    if opts.pred.startswith("dir:"):
        raise InvalidConfig("predict needs a built-in predictor (ego or icp)")
    manifest = unify.DatasetManifest.load(args.manifest)
    n = evaluate.write_predictions(manifest, opts, args.out, limit=args.limit)
    return {"out": args.out, "pairs": n}


def cmd_analyze(args) -> None:
    if args.what == "velocity-hist":
        if not args.manifest:
            raise InvalidConfig("velocity-hist needs --manifest")
        opts = _eval_options(args)
        manifest = unify.DatasetManifest.load(args.manifest)
        hist = evaluate.manifest_velocity_histogram(manifest, args.bin_width, opts, limit=args.limit)
        text = hist.to_csv() if args.format == "csv" else json.dumps(hist.to_dict(), sort_keys=True, indent=2) + "\n"
    else:
        if not args.report:
            raise InvalidConfig("range-table needs --report")
        rep = json.loads(Path(args.report).read_text())
        rows = ["range_bucket,dynamic_mean"] + [f"\"{k}\",{v!r}" for k, v in rep.get("range_table", {}).items()]
        text = "\n".join(rows) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return None


# -- voxel -----------------------------------------------------------------


def cmd_voxel(args) -> dict:
    old = voxelgrid.GridConfig.load(args.old)
    ranges = {"x": old.x_range, "y": old.y_range, "z": old.z_range}
    for axis, lo, hi in args.new_range or []:
        if axis not in ranges:
            raise InvalidConfig(f"--new-range axis must be x, y or z, got {axis!r}")
        ranges[axis] = (float(lo), float(hi))
    new, offset = voxelgrid.extend_grid(old, (ranges["x"], ranges["y"], ranges["z"]))
    result = {"grid": new.to_dict(), "offset": list(offset)}
    if args.out:
        io.write_json(args.out, new.to_dict())
    return result


# -- parser ----------------------------------------------------------------


def _add_eval_flags(p: argparse.ArgumentParser, pred_default: str = "ego") -> None:
    p.add_argument("--manifest", help="manifest JSON")
    p.add_argument("--pred", default=pred_default, help="ego, icp or dir:PATH")
    p.add_argument("--ground-remove", action=argparse.BooleanOptionalAction, default=True, help="LineFit ground removal (default on)")
    p.add_argument("--ground-params", help="GroundParams JSON")
    p.add_argument("--icp-params", help="IcpParams JSON")
    p.add_argument("--taxonomy", help="taxonomy JSON (packaged default otherwise)")
    p.add_argument("--speed-edges", type=_float_or_inf, nargs="+", default=list(metrics.SpeedBuckets.edges))
    p.add_argument("--dynamic-threshold", type=float, default=0.05)
    p.add_argument("--range-edges", type=_float_or_inf, nargs="+", default=list(metrics.RangeBuckets.edges))
    p.add_argument("--aggregation", choices=metrics.AGGREGATIONS, default="per_class")
    p.add_argument("--limit", type=int, help="only the first N pairs")


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = _Parser(prog="flowbench", description="LiDAR scene flow benchmark harness")
    parser.add_argument("--version", action="version", version=f"flowbench {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file of flag defaults; explicit flags win")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _add = sub.add_parser

    def add_parser(name, **kw):
        return _add(name, parents=[common], **kw)

    sub.add_parser = add_parser
    subs = {}

    p = subs["synth"] = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--dataset-id", default="synth")
    p.add_argument("--preset", choices=("random", "cube", "ground", "speed-suite"), default="random")
    p.add_argument("--sequences", type=int, default=4)
    p.add_argument("--frames", type=int, help="frames per sequence (preset default)")
    p.add_argument("--objects", type=int, default=4, help="objects per random scene")
    p.add_argument("--native-hz", type=float, help="frame rate (10 Hz default)")
    p.add_argument("--annotation-every", type=int, default=1)
    p.add_argument("--noise", type=float, help="range noise sigma in meters")
    p.add_argument("--seed", type=int)
    p.add_argument("--taxonomy", help="taxonomy JSON covering --dataset-id (packaged default maps synth*)")
    p.set_defaults(func=cmd_synth)

    p = subs["manifest"] = sub.add_parser("manifest", help="build a dataset manifest")
    p.add_argument("action", choices=("build",))
    p.add_argument("--root", action="append", required=True, help="dataset root (repeatable)")
    p.add_argument("--target-hz", type=float, default=10.0)
    p.add_argument("--strategy", help="sampling weights stored in the manifest (default uniform)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_manifest)

    p = subs["augment"] = sub.add_parser("augment", help="write an augmented copy of a dataset")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--height-jitter", action="store_true")
    p.add_argument("--beam-dropout", action="store_true")
    p.add_argument("--sparsify", action="store_true")
    p.add_argument("--velocity-factor", type=int)
    p.add_argument("--jitter-prob", type=float, default=0.8)
    p.add_argument("--jitter-range", type=float, nargs=2, default=[0.5, 2.0])
    p.add_argument("--jitter-sign", choices=[s.value for s in augment.JitterSign], default="POSITIVE_ONLY")
    p.add_argument("--dropout-prob", type=float, default=0.35)
    p.add_argument("--dropout-parity", choices=[s.value for s in augment.DropParity], default="RANDOM_PER_SWEEP")
    p.set_defaults(func=cmd_augment)

    p = subs["sample"] = sub.add_parser("sample", help="emit a sample-order log (JSON lines)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--strategy", default="uniform", help="uniform | proportional | heavy:<id> | explicit:<json>")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sample)

    p = subs["evaluate"] = sub.add_parser("evaluate", help="score predictions over a manifest")
    _add_eval_flags(p)
    p.add_argument("--out", required=True, help="report JSON")
    p.add_argument("--table", help="text table path (stdout otherwise)")
    p.add_argument("--shards", type=int, default=1)
    p.add_argument("--jobs", type=int, help="worker processes (default $FLOWBENCH_JOBS or 1)")
    p.set_defaults(func=cmd_evaluate)

    p = subs["predict"] = sub.add_parser("predict", help="store built-in predictions as flow files")
    _add_eval_flags(p, pred_default="icp")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = subs["analyze"] = sub.add_parser("analyze", help="velocity histograms and range tables")
    p.add_argument("what", choices=("velocity-hist", "range-table"))
    _add_eval_flags(p)
    p.add_argument("--report", help="report JSON (range-table)")
    p.add_argument("--bin-width", type=float, default=0.1)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze)

    p = subs["voxel"] = sub.add_parser("voxel", help="voxel grid tools")
    p.add_argument("action", choices=("extend",))
    p.add_argument("--old", required=True, help="GridConfig JSON")
    p.add_argument("--new-range", nargs=3, action="append", metavar=("AXIS", "LO", "HI"))
    p.add_argument("--out", help="write the new GridConfig JSON here")
    p.set_defaults(func=cmd_voxel)
    return parser, subs


def _load_config(path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidConfig(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise InvalidConfig("config file must hold a JSON object")
    return cfg


def _apply_config(argv: list[str], subs: dict, command: str | None) -> None:
    """Install config-file values as parser defaults so explicit flags override them."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config or command is None:
        return
    cfg = _load_config(known.config)
    p = subs[command]
    values = {k.replace("-", "_"): v for k, v in cfg.items()}
    values.update({k.replace("-", "_"): v for k, v in cfg.get(command, {}).items()} if isinstance(cfg.get(command), dict) else {})
    actions = {a.dest: a for a in p._actions if a.dest not in ("help", "config", "func")}
    found = {k: v for k, v in values.items() if k in actions}
    for k in found:
        actions[k].required = False
    p.set_defaults(**found)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    command = next((a for a in argv if a in subs), None)
    try:
        _apply_config(argv, subs, command)
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # usage errors, --help and --version
            return exc.code if isinstance(exc.code, int) else 2
        result = args.func(args)
    except FlowbenchError as exc:
        _emit_error(exc.code, str(exc), command)
        return 2
    except (OSError, ValueError) as exc:
        _emit_error("io_error" if isinstance(exc, OSError) else "invalid_value", str(exc), command)
        return 2
    if result is not None:
        sys.stdout.write(json.dumps(result, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
