"""Command line interface: ``ltvdet <subcommand> [options]``.

Subcommands: train, detect, eval, bench, augment, folds, inspect, synth.
Every run that takes ``--out`` writes ``run.txt`` with the fully resolved
configuration as sorted ``key = value`` lines. Errors exit with 2 (config),
3 (data) or 4 (numeric).
"""
import argparse
import csv
import hashlib
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import dataio, evaluation, synthetic
from .config import RESOLUTION_PRESETS, config_items, load_config, serialize_config
from .estimator import DetectionPipeline
from .exceptions import ConfigError, DataError, LTVError
from .graph import Model, check_weights, count_params, flop_estimate, layer_specs
from .imaging import ARTIFACT_MODES, augment_sample, fog_rain_overlay, thermal_artifacts
from .postprocess import Detection
from .train import samples_from_manifest, train

logger = logging.getLogger("ltvdet")

DETECTION_HEADER = ["frame_id", "class_id", "score", "x1", "y1", "x2", "y2"]


# ------------------------------------------------------------------ helpers


def parse_resolution(text):
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"resolution must look like WIDTHxHEIGHT, got {text!r}") from None
    if w < 1 or h < 1:
        raise ConfigError(f"resolution must be positive, got {text!r}")
    return w, h


def prepare_out(path, force):
    """Create ``path``; refuse a non-empty existing directory unless forced."""
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise ConfigError(f"output path {out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty; pass --force to write into it")
    out.mkdir(parents=True, exist_ok=True)
    return out


def resolved_config(args):
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed = {args.seed}")
    return load_config(args.config, overrides)


def write_run(out, cfg, extra):
    items = dict(config_items(cfg))
    items.update({k: str(v) for k, v in extra.items()})
    dataio.atomic_write_text(out / "run.txt", "".join(f"{k} = {items[k]}\n" for k in sorted(items)))


def sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def sidecar_path(weights_path):
    return Path(weights_path).with_suffix(".cfg")


def load_model(weights_path, args):
    """Weights plus the config from ``--config`` or, failing that, the sidecar."""
    weights = dataio.read_weights(weights_path)
    cfg_path = args.config
    if cfg_path is None and sidecar_path(weights_path).is_file():
        cfg_path = sidecar_path(weights_path)
    overrides = list(args.set or [])
    cfg = load_config(cfg_path, overrides)
    check_weights(weights, cfg.model)
    return Model(cfg.model, weights), cfg


def list_frames(path):
    """``(frame_id, frame, boxes, classes, tags)`` from a manifest or a PGM directory."""
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob("*.pgm"))
        if not files:
            raise DataError(f"no .pgm frames in {p}")
        return [(f.stem, dataio.read_frame(f), None, None, ()) for f in files]
    manifest = dataio.load_manifest(p)
    out = []
    for k, e in enumerate(manifest.entries):
        frame, boxes, classes, tags = manifest.load_sample(k)
        out.append((e.image_id, frame, boxes, classes, tags))
    return out


def write_detections(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DETECTION_HEADER)
        for frame_id, d in rows:
            w.writerow([frame_id, d.class_id, f"{d.score:.6f}"] + [f"{v:.6f}" for v in d.bbox])


def read_detections(path):
    """Detection CSV -> ordered ``{frame_id: [Detection]}``."""
    p = Path(path)
    if p.is_dir():
        p = p / "detections.csv"
    if not p.is_file():
        raise DataError(f"detections file not found: {p}")
    out = {}
    with open(p, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != DETECTION_HEADER:
            raise DataError(f"{p}: expected header {','.join(DETECTION_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 7:
                raise dataio.ParseError(f"{p}: expected 7 fields", lineno)
            try:
                box = tuple(float(v) for v in row[3:])
                det = Detection(box, float(row[2]), int(row[1]))
            except ValueError:
                raise dataio.ParseError(f"{p}: non-numeric field", lineno) from None
            out.setdefault(row[0], []).append(det)
    return out


def read_frame_ids(det_path):
    """Frame order recorded by ``detect`` (frames with no detections included)."""
    p = Path(det_path)
    p = p / "frames.txt" if p.is_dir() else p.with_name("frames.txt")
    if p.is_file():
        return [l.strip() for l in p.read_text().splitlines() if l.strip()]
    return None


# --------------------------------------------------------------- subcommands


def cmd_train(args):
    cfg = resolved_config(args)
    manifest = dataio.load_manifest(args.data)
    holdout_ids = []
    if args.folds is not None:
        split = dataio.read_folds(args.folds, manifest.image_ids)
        if not 0 <= args.holdout < split.k:
            raise ConfigError(f"--holdout must lie in [0, {split.k})")
        holdout_ids = split.folds[args.holdout]
        train_manifest = manifest.subset(split.train_ids(args.holdout))
    else:
        train_manifest = manifest
    out = prepare_out(args.out, args.force)
    samples = samples_from_manifest(train_manifest)
    model = Model.build(cfg.model, seed=cfg.train.seed)
    weights_path = out / "weights.ltvw"
    dataio.atomic_write_text(sidecar_path(weights_path), serialize_config(cfg))
    result = train(samples, model, cfg.train, cfg.aug, log_path=out / "epochs.csv", checkpoint_path=weights_path)

    pipe = DetectionPipeline(model, cfg.train.input_width, cfg.train.input_height, tau=args.score_floor)
    report_lines = {
        "train_images": len(samples),
        "train_views_per_epoch": len(samples) * (1 + cfg.train.scale_crops),
        "dropped_targets": result.dropped_targets,
        "final_loss": f"{result.history[-1].loss.total:.6f}",
        "first_loss": f"{result.history[0].loss.total:.6f}",
    }
    dets = [pipe(s.frame) for s in samples]
    gts = [(s.boxes, s.classes) for s in samples]
    rep = evaluation.build_report(dets, gts, cfg.model.num_classes, tau=args.tau)
    rep.write(out / "eval_train", manifest.class_names)
    report_lines["train_map50"] = f"{rep.map50:.6f}"
    if holdout_ids:
        held = samples_from_manifest(manifest.subset(holdout_ids))
        hrep = evaluation.build_report(
            [pipe(s.frame) for s in held], [(s.boxes, s.classes) for s in held], cfg.model.num_classes,
            tau=args.tau, tags_per_image=[s.tags for s in held],
        )
        hrep.write(out / "eval_holdout", manifest.class_names)
        report_lines["holdout_map50"] = f"{hrep.map50:.6f}"
    dataio.atomic_write_text(out / "report.txt", "".join(f"{k} = {v}\n" for k, v in report_lines.items()))
    write_run(out, cfg, {"command": "train", "data": args.data, "folds": args.folds, "holdout": args.holdout, "tau": args.tau})
    print(f"trained {cfg.train.epochs} epochs on {len(samples)} images; train mAP@0.5 = {rep.map50:.6f}")
    return 0


def cmd_detect(args):
    if not 0.0 <= args.tau <= 1.0:
        raise ConfigError(f"--tau must lie in [0, 1], got {args.tau}")
    model, cfg = load_model(args.weights, args)
    w, h = parse_resolution(args.resolution) if args.resolution else (cfg.train.input_width, cfg.train.input_height)
    frames = list_frames(args.frames)
    out = prepare_out(args.out, args.force)
    pipe = DetectionPipeline(model, w, h, tau=args.tau, iou_thresh=args.iou)
    rows = []
    for frame_id, frame, *_ in frames:
        rows.extend((frame_id, d) for d in pipe(frame))
    write_detections(out / "detections.csv", rows)
    dataio.atomic_write_text(out / "frames.txt", "".join(f"{f[0]}\n" for f in frames))
    meta = {
        "resolution": f"{w}x{h}",
        "tau": args.tau,
        "iou_thresh": args.iou,
        "seed": cfg.train.seed,
        "weights_sha256": sha256_file(args.weights),
        "frames": len(frames),
        "detections": len(rows),
    }
    dataio.atomic_write_text(out / "meta.txt", "".join(f"{k} = {v}\n" for k, v in meta.items()))
    write_run(out, cfg, {"command": "detect", "frames_path": args.frames, "weights": args.weights, **meta})
    print(f"{len(rows)} detections over {len(frames)} frames at {w}x{h}")
    return 0


def _gts_for(frame_ids, manifest):
    by_id = {e.image_id: k for k, e in enumerate(manifest.entries)}
    gts, tags = [], []
    for fid in frame_ids:
        if fid not in by_id:
            raise DataError(f"frame {fid!r} has detections but is not in the manifest")
        _, boxes, classes, t = manifest.load_sample(by_id[fid])
        gts.append((boxes, classes))
        tags.append(t)
    return gts, tags


def cmd_eval(args):
    cfg = resolved_config(args)
    manifest = dataio.load_manifest(args.data)
    dets = read_detections(args.detections)
    ids = read_frame_ids(args.detections) or manifest.image_ids
    out = prepare_out(args.out, args.force)
    gts, tags = _gts_for(ids, manifest)
    per_frame = [dets.get(i, []) for i in ids]
    rep = evaluation.build_report(per_frame, gts, len(manifest.class_names), tau=args.tau, tags_per_image=tags)
    rep.series = evaluation.confidence_timeseries(per_frame)
    if args.paired is not None:
        other = read_detections(args.paired)
        rep.paired = evaluation.paired_deltas(rep.series, evaluation.confidence_timeseries([other.get(i, []) for i in ids]))
    rep.write(out, manifest.class_names)
    write_run(out, cfg, {"command": "eval", "detections": args.detections, "paired": args.paired, "data": args.data, "tau": args.tau})
    print(f"mAP@0.5 = {rep.map50:.6f}")
    return 0


def cmd_bench(args):
    cfg = resolved_config(args)
    if args.weights:
        model, cfg = load_model(args.weights, args)
    else:
        model = Model.build(cfg.model, seed=cfg.train.seed)
    resolutions = [parse_resolution(r) for r in args.resolution] if args.resolution else list(RESOLUTION_PRESETS)
    out = prepare_out(args.out, args.force)
    frames = [s.frame for s in synthetic.make_sequence(cfg.train.seed, args.frames + args.warmup)]
    rows = []
    for w, h in resolutions:
        stats = evaluation.fps_bench(DetectionPipeline(model, w, h, tau=args.tau), frames, warmup=args.warmup)
        rows.append((w, h, stats))
        print(f"{w}x{h}: {stats.mean_fps:.1f} FPS (p50 {stats.p50_ms:.2f} ms, p99 {stats.p99_ms:.2f} ms)")
    with open(out / "bench.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["width", "height", "frames", "mean_fps", "p50_ms", "p99_ms"])
        for w, h, s in rows:
            wr.writerow([w, h, s.frames, f"{s.mean_fps:.6f}", f"{s.p50_ms:.6f}", f"{s.p99_ms:.6f}"])
    write_run(out, cfg, {"command": "bench", "frames": args.frames, "warmup": args.warmup,
                         "resolutions": ",".join(f"{w}x{h}" for w, h in resolutions)})
    return 0


def cmd_augment(args):
    cfg = resolved_config(args)
    seed = cfg.train.seed
    items = list_frames(args.data)
    out = prepare_out(args.out, args.force)
    scenes = []
    for k, (fid, frame, boxes, classes, tags) in enumerate(items):
        boxes = np.zeros((0, 4)) if boxes is None else boxes
        classes = np.zeros(0, dtype=np.int64) if classes is None else classes
        rng = np.random.default_rng([seed, k])
        if args.mode in ARTIFACT_MODES:
            res = thermal_artifacts(frame, boxes, args.mode, rng)
            frame, boxes = res.frame, res.boxes
        elif args.mode in ("fog", "rain"):
            frame = fog_rain_overlay(frame, args.mode, args.intensity, rng)
        else:
            frame, boxes, classes = augment_sample(frame, boxes, classes, cfg.aug, rng)
        scenes.append(synthetic.Scene(frame, boxes, classes, tuple(tags), fid))
    synthetic.write_dataset(out, scenes)
    write_run(out, cfg, {"command": "augment", "mode": args.mode, "intensity": args.intensity, "data": args.data})
    print(f"wrote {len(scenes)} augmented frames to {out}")
    return 0


def cmd_folds(args):
    cfg = resolved_config(args)
    manifest = dataio.load_manifest(args.data)
    counts = dataio.manifest_class_counts(manifest)
    split = dataio.make_folds(counts, k=args.k, seed=cfg.train.seed)
    out = prepare_out(args.out, args.force)
    dataio.write_folds(split, out)
    with open(out / "folds.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["fold", "images"] + [f"n_{n}" for n in manifest.class_names])
        for f, ids in enumerate(split.folds):
            tot = np.sum([counts[i] for i in ids], axis=0)
            wr.writerow([f, len(ids)] + [int(v) for v in tot])
    write_run(out, cfg, {"command": "folds", "k": args.k, "data": args.data})
    print(f"wrote {split.k} folds to {out}")
    return 0


def inspect_text(cfg, resolution):
    mc = cfg.model
    w, h = resolution
    ph, pw = -(-h // mc.max_stride) * mc.max_stride, -(-w // mc.max_stride) * mc.max_stride
    sep, std = count_params(mc, True), count_params(mc, False)
    f_sep, f_std = flop_estimate(mc, (ph, pw), True), flop_estimate(mc, (ph, pw), False)
    size = len(dataio.encode_weights(Model.build(mc).weights))
    lines = [
        f"params            {sep}",
        f"params_standard   {std}",
        f"macs              {f_sep}  (input {pw}x{ph})",
        f"macs_standard     {f_std}",
        f"mac_reduction     {1 - f_sep / f_std:.4f}",
        f"weight_file_bytes {size}",
        "",
        f"{'layer':<22}{'c_in':>6}{'c_out':>7}{'k':>3}{'s':>3}{'groups':>8}{'stride':>8}",
    ]
    for sp in layer_specs(mc):
        lines.append(f"{sp.name:<22}{sp.c_in:>6}{sp.c_out:>7}{sp.k:>3}{sp.stride:>3}{sp.groups:>8}{sp.out_stride:>8}")
    return "\n".join(lines) + "\n"


def cmd_inspect(args):
    cfg = resolved_config(args)
    res = parse_resolution(args.resolution) if args.resolution else (cfg.train.input_width, cfg.train.input_height)
    text = inspect_text(cfg, res)
    sys.stdout.write(text)
    if args.out:
        out = prepare_out(args.out, args.force)
        dataio.atomic_write_text(out / "inspect.txt", text)
        write_run(out, cfg, {"command": "inspect", "resolution": f"{res[0]}x{res[1]}"})
    return 0


def cmd_synth(args):
    cfg = resolved_config(args)
    seed = cfg.train.seed
    if args.kind == "overfit":
        scenes = synthetic.overfit_set(seed, n=args.n)
    elif args.kind == "sequence":
        scenes = synthetic.make_sequence(seed, n_frames=args.n)
    else:
        n_hot = args.n // 2
        scenes = synthetic.hot_background_set(seed, args.n - n_hot, n_hot)
    out = prepare_out(args.out, args.force)
    synthetic.write_dataset(out, scenes)
    write_run(out, cfg, {"command": "synth", "kind": args.kind, "n": args.n})
    print(f"wrote {len(scenes)} {args.kind} frames to {out}")
    return 0


# ------------------------------------------------------------------ parser


def _common(p, out_required=True):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    p.add_argument("--out", required=out_required, help="output directory (must be empty unless --force)")
    p.add_argument("--force", action="store_true", help="write into a non-empty output directory")


def build_parser():
    parser = argparse.ArgumentParser(prog="ltvdet", description="Thermal pedestrian detector toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a detector from a manifest")
    _common(p)
    p.add_argument("--data", required=True, help="dataset manifest (TSV)")
    p.add_argument("--folds", help="directory of fold_k.txt files")
    p.add_argument("--holdout", type=int, default=0, help="fold index held out for evaluation")
    p.add_argument("--tau", type=float, default=0.5, help="operating threshold for the report")
    p.add_argument("--score-floor", type=float, default=0.01, help="lowest score kept when ranking for AP")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="run detection on frames")
    _common(p)
    p.add_argument("--weights", required=True, help="LTVW weight file")
    p.add_argument("--frames", required=True, help="manifest or directory of .pgm frames")
    p.add_argument("--resolution", help="network input WIDTHxHEIGHT, e.g. 140x112")
    p.add_argument("--tau", type=float, default=0.5, help="score threshold in [0, 1]")
    p.add_argument("--iou", type=float, default=0.5, help="NMS IoU threshold")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="score detections against a manifest")
    _common(p)
    p.add_argument("--detections", required=True, help="detect output directory or detections.csv")
    p.add_argument("--paired", help="second detect output for paired time-series deltas")
    p.add_argument("--data", required=True, help="manifest with ground truth")
    p.add_argument("--tau", type=float, default=0.5, help="operating threshold for P/R/F1")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="measure end-to-end throughput")
    _common(p)
    p.add_argument("--weights", help="LTVW weight file (random init when omitted)")
    p.add_argument("--resolution", action="append", help="WIDTHxHEIGHT (repeatable; default: the three presets)")
    p.add_argument("--frames", type=int, default=100, help="timed frames per resolution")
    p.add_argument("--warmup", type=int, default=10, help="extra untimed leading frames")
    p.add_argument("--tau", type=float, default=0.5)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("augment", help="write augmented copies of frames")
    _common(p)
    p.add_argument("--data", required=True, help="manifest or directory of .pgm frames")
    p.add_argument("--mode", required=True, choices=list(ARTIFACT_MODES) + ["fog", "rain", "pipeline"])
    p.add_argument("--intensity", type=float, default=0.5, help="fog/rain strength in [0, 1]")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("folds", help="write stratified K-fold split files")
    _common(p)
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--k", type=int, default=10, help="number of folds")
    p.set_defaults(func=cmd_folds)

    p = sub.add_parser("inspect", help="print model summary, parameter and MAC counts")
    _common(p, out_required=False)
    p.add_argument("--resolution", help="input WIDTHxHEIGHT for the MAC count")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("synth", help="generate a synthetic thermal dataset")
    _common(p)
    p.add_argument("--kind", choices=["overfit", "sequence", "hotbg"], default="overfit")
    p.add_argument("--n", type=int, default=8, help="number of frames")
    p.set_defaults(func=cmd_synth)
    return parser


def _thread_limit():
    raw = os.environ.get("LTV_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"LTV_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"LTV_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        limit = _thread_limit()
        if limit is None:
            return args.func(args)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=limit):
            return args.func(args)
    except LTVError as exc:
        print(f"ltvdet {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"ltvdet {args.command}: error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
