"""Command-line front end: ``houghcnn {phantom,train,build-db,calibrate,segment,eval}``.

Exit codes: 0 success (region failures are reported, not fatal), 1 usage,
2 input/output problems, 3 training divergence. Options can also come from a
JSON ``--config`` file whose keys are the long option names; explicit flags
override it.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .dense import semantic_segment
from .evaluation import (
    dice_histogram,
    evaluate_labels,
    summarize,
    write_histogram_csv,
    write_results_csv,
)
from .dense import dense_forward
from .hough import HoughConfig, RegionReport, CALIBRATION_GRID, calibrate_threshold, segment_all_regions, segment_region, write_report
from .houghdb import HoughDBError, build_database, load_db, save_db
from .net import ArchError, TrainConfig, TrainingDiverged, WeightFileError, init_msra, load_weights, parse_arch, save_weights, train
from .patch import TrainingSet, normalize_mode, sample_training_set
from .phantom import PhantomSpecError, cohort_specs, default_spec, generate_phantom, load_spec
from .volume import LabelVolume, VolumeFormatError, load_volume, save_volume

log = logging.getLogger("houghcnn")

EXIT_USAGE, EXIT_IO, EXIT_DIVERGED = 1, 2, 3
COHORT_MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _atomic_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_run_manifest(path, command, args, inputs, outputs, seed, started, extra=None) -> None:
    """Record what ran: command, resolved options, files, seed, wall time and version."""
    config = {k: (v if isinstance(v, (int, float, str, bool, type(None), list)) else str(v))
              for k, v in sorted(vars(args).items()) if k not in ("func", "config")}
    doc = {
        "command": command,
        "config": config,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "seed": seed,
        "wall_time_s": round(time.time() - started, 3),
        "version": __version__,
    }
    doc.update(extra or {})
    _atomic_text(Path(path), json.dumps(doc, indent=2, sort_keys=True) + "\n")


def discover_cohort(data_dir) -> list[tuple[Path, Path]]:
    """(image, labels) pairs of a data directory, from its manifest or by file names."""
    d = Path(data_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"data directory {d} not found")
    man = d / COHORT_MANIFEST
    if man.exists():
        doc = json.loads(man.read_text())
        pairs = [(d / v["image"], d / v["labels"]) for v in doc.get("volumes", [])]
    else:
        pairs = [(p.with_name(p.name.replace("_labels.mhd", ".mhd")), p) for p in sorted(d.glob("*_labels.mhd"))]
    if not pairs:
        raise FileNotFoundError(f"no labeled volumes in {d}")
    return pairs


def _load_pairs(pairs):
    out = []
    for img, lab in pairs:
        v, l = load_volume(img), load_volume(lab)
        if not isinstance(l, LabelVolume):
            raise VolumeFormatError(f"{lab} is not a UINT8 label volume")
        out.append((v, l))
    return out


# -- commands ------------------------------------------------------------


def cmd_phantom(args) -> int:
    started = time.time()
    spec = load_spec(args.spec) if args.spec else default_spec()
    if args.seed is not None:
        spec.seed = args.seed
    specs = cohort_specs(spec, args.n, args.jitter, spec.seed)
    phantoms = [generate_phantom(s) for s in specs]  # all in memory before anything is written
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries, files = [], []
    for i, (vol, lab) in enumerate(phantoms):
        img_name, lab_name = f"{args.prefix}_{i:03d}.mhd", f"{args.prefix}_{i:03d}_labels.mhd"
        save_volume(vol, out / img_name)
        save_volume(lab, out / lab_name)
        entries.append({"image": img_name, "labels": lab_name, "seed": specs[i].seed})
        files += [out / img_name, out / lab_name]
    write_run_manifest(out / COHORT_MANIFEST, "phantom", args, [args.spec] if args.spec else [], files,
                       spec.seed, started, extra={"volumes": entries})
    log.info("wrote %d phantoms to %s", len(phantoms), out)
    return 0


def cmd_train(args) -> int:
    started = time.time()
    mode = normalize_mode(args.mode)
    pairs = discover_cohort(args.data)
    data = _load_pairs(pairs)
    regions = sorted({r for _, l in data for r in l.regions})
    num_classes = (max(regions) if regions else 0) + 1
    if num_classes < 2:
        raise UsageError("training data has no foreground regions")
    arch = parse_arch(args.arch, rank=3 if mode == "3d" else 2, in_channels=3 if mode == "2.5d" else 1,
                      num_classes=num_classes, input_size=args.patch_size)
    per_volume = max(1, -(-args.patches // (num_classes * len(data))))
    # an explicit notation string carries its own input size
    sets = [sample_training_set(v, l, per_volume, mode, arch.input_size, seed=args.seed + i,
                                classes=list(range(num_classes)))
            for i, (v, l) in enumerate(data)]
    ts = TrainingSet.concatenate(sets)
    if len(ts) < args.batch_size:
        raise UsageError(f"only {len(ts)} training patches; need at least one batch of {args.batch_size}")
    cfg = TrainConfig(args.lr, args.momentum, args.weight_decay, args.batch_size, args.epochs, args.dropout, args.seed)
    net = init_msra(arch, seed=args.seed, dropout_ratio=args.dropout)
    log.info("training %s on %d patches (%s)", arch.notation, len(ts), ts.class_counts)
    net, logs = train(net, ts, cfg)
    out = Path(args.out)
    save_weights(net, out)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".epochs.csv")
    with open(log_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "accuracy"])
        for e in logs:
            w.writerow([e.epoch, f"{e.loss:.6f}", f"{e.accuracy:.6f}"])
    write_run_manifest(out.with_name(out.name + ".run.json"), "train", args,
                       [p for pair in pairs for p in pair], [out, log_path], args.seed, started)
    print(f"final training accuracy {logs[-1].accuracy:.4f}")
    return 0


def cmd_build_db(args) -> int:
    started = time.time()
    net = load_weights(args.weights)
    pairs = discover_cohort(args.data)
    data = _load_pairs(pairs)
    out = Path(args.out)
    base = out.resolve().parent
    manifest = [os.path.relpath(Path(lab).resolve(), base) for _, lab in pairs]
    db = build_database(net, data, args.region, args.mode, args.stride, inline_masks=args.inline,
                        seg_patch=args.seg_patch, manifest=manifest, threads=args.threads)
    save_db(db, out)
    write_run_manifest(out.with_name(out.name + ".run.json"), "build-db", args,
                       [args.weights] + [p for pair in pairs for p in pair], [out], None, started)
    print(f"region {db.region}: {len(db)} records")
    return 0


def _hough_config(args) -> HoughConfig:
    return HoughConfig(r=args.radius, sigma=args.sigma, K=args.knn, max_dist=args.max_dist,
                       seg_patch=args.seg_patch, threshold=getattr(args, "threshold", 0.5))


def _load_dbs(args):
    dbs = [load_db(p) for p in args.db]
    for db in dbs:
        if db.seg_patch != args.seg_patch:
            raise UsageError(f"database patch side {db.seg_patch} differs from --seg-patch {args.seg_patch}")
    return dbs


def cmd_calibrate(args) -> int:
    started = time.time()
    net = load_weights(args.weights)
    pairs = discover_cohort(args.data)
    data = _load_pairs(pairs)
    dbs = _load_dbs(args)
    cfg = _hough_config(args)
    found = []
    for vol, lab in data:
        dense = dense_forward(net, vol, args.mode, threads=args.threads)
        for db in dbs:
            rep = segment_region(dense, db, cfg, vol.dims, args.threads)
            S = rep.seg_map if rep.success else np.zeros(vol.dims)
            found.append((S, lab.data == db.region))
    best, scores = calibrate_threshold(found)
    out = Path(args.out)
    _atomic_text(out, json.dumps({"threshold": best}) + "\n")
    write_run_manifest(out.with_name(out.name + ".run.json"), "calibrate", args,
                       [args.weights] + list(args.db) + [p for pair in pairs for p in pair], [out], None, started,
                       extra={"mean_dice": {f"{t:.2f}": round(float(v), 6) for t, v in zip(CALIBRATION_GRID, scores)}})
    print(f"threshold {best:.2f} (mean validation dice {scores.max():.4f})")
    return 0


def cmd_segment(args) -> int:
    started = time.time()
    vol = load_volume(args.volume)
    net = load_weights(args.weights)
    if args.semantic:
        labels = semantic_segment(net, vol, args.mode, threads=args.threads)
        reports = []
        for r in range(1, net.arch.num_classes):
            m = labels.data == r
            c = tuple(int(v) for v in np.floor(np.argwhere(m).mean(axis=0) + 0.5)) if m.any() else None
            reports.append(RegionReport(r, bool(m.any()), c, 0, int(m.sum())))
    else:
        if not args.db:
            raise UsageError("at least one --db is required unless --semantic is given")
        dbs = _load_dbs(args)
        labels, reports = segment_all_regions(vol, net, dbs, _hough_config(args), args.mode, threads=args.threads)
    out = Path(args.out)
    save_volume(labels, out)
    report = Path(args.report) if args.report else out.with_name(out.stem + "_report.csv")
    write_report(reports, report)
    write_run_manifest(out.with_name(out.name + ".run.json"), "segment", args,
                       [args.volume, args.weights] + list(args.db or []), [out, report], None, started)
    for r in reports:
        log.info("region %d success=%s centroid=%s survivors=%d voxels=%d",
                 r.region, r.success, r.centroid, r.survivors, r.mask_voxels)
    return 0


def cmd_eval(args) -> int:
    started = time.time()
    if len(args.pred) != len(args.gt):
        raise UsageError("--pred and --gt need the same number of files")
    results = []
    for p, g in zip(args.pred, args.gt):
        pv, gv = load_volume(p), load_volume(g)
        if pv.dims != gv.dims:
            raise UsageError(f"{p} and {g} have different dims")
        results += evaluate_labels(pv.data, gv.data, gv.spacing, volume=Path(p).name)
    out = Path(args.out)
    write_results_csv(results, out)
    hist = Path(args.hist) if args.hist else out.with_name(out.stem + "_hist.csv")
    write_histogram_csv(dice_histogram(results), hist)
    write_run_manifest(out.with_name(out.name + ".run.json"), "eval", args,
                       list(args.pred) + list(args.gt), [out, hist], None, started)
    if results:
        s = summarize(results)
        dist = "n/a" if s.mean_distance is None else f"{s.mean_distance:.3f} mm"
        print(f"mean dice {s.mean_dice:.4f}  mean distance {dist}  failures {100 * s.failure_rate:.1f}%")
    return 0


# -- parser --------------------------------------------------------------


def _float(s):
    return float("inf") if s.lower() in ("inf", "none") else float(s)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="houghcnn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", help="JSON file of option defaults (flags override it)")
        sp.add_argument("--threads", type=int, default=1)
        if seed:
            sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("phantom", help="generate a synthetic cohort")
    sp.add_argument("--spec", help="phantom spec file (key = value); built-in two-region spec if omitted")
    sp.add_argument("--out", required=True)
    sp.add_argument("-n", type=int, default=1)
    sp.add_argument("--jitter", type=float, default=0.0)
    sp.add_argument("--prefix", default="phantom")
    common(sp, seed=False)
    sp.add_argument("--seed", type=int, default=None, help="overrides the seed in the phantom spec file")
    sp.set_defaults(func=cmd_phantom)

    sp = sub.add_parser("train", help="train a patch classifier")
    sp.add_argument("--data", required=True)
    sp.add_argument("--arch", default="7-5-3")
    sp.add_argument("--mode", choices=["2d", "2.5d", "3d"], default="2d")
    sp.add_argument("--out", required=True)
    sp.add_argument("--log")
    sp.add_argument("--patches", type=int, default=20000, help="total balanced patches")
    sp.add_argument("--patch-size", type=int, default=31)
    sp.add_argument("--epochs", type=int, default=15)
    sp.add_argument("--batch-size", type=int, default=64)
    sp.add_argument("--lr", type=float, default=1e-2)
    sp.add_argument("--momentum", type=float, default=0.9)
    sp.add_argument("--weight-decay", type=float, default=5e-4)
    sp.add_argument("--dropout", type=float, default=0.5)
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("build-db", help="build a region's vote database")
    sp.add_argument("--data", required=True)
    sp.add_argument("--weights", required=True)
    sp.add_argument("--region", type=int, required=True)
    sp.add_argument("--mode", choices=["2d", "2.5d", "3d"], default="2d")
    sp.add_argument("--stride", type=int, default=1)
    sp.add_argument("--seg-patch", type=int, default=9)
    sp.add_argument("--inline", action="store_true", help="store segmentation patches inline")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_build_db)

    def voting(sp):
        sp.add_argument("--mode", choices=["2d", "2.5d", "3d"], default="2d")
        sp.add_argument("--radius", type=float, default=3.0)
        sp.add_argument("--sigma", type=float, default=1.0)
        sp.add_argument("--knn", type=int, default=20)
        sp.add_argument("--max-dist", type=_float, default=float("inf"))
        sp.add_argument("--seg-patch", type=int, default=9)

    sp = sub.add_parser("calibrate", help="choose the seg-map threshold on validation volumes")
    sp.add_argument("--data", required=True)
    sp.add_argument("--weights", required=True)
    sp.add_argument("--db", nargs="+", required=True)
    sp.add_argument("--out", required=True, help="JSON file usable as 'segment --config'")
    voting(sp)
    common(sp)
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("segment", help="segment a volume")
    sp.add_argument("--volume", required=True)
    sp.add_argument("--weights", required=True)
    sp.add_argument("--db", nargs="+", default=[])
    sp.add_argument("--out", required=True)
    sp.add_argument("--report")
    sp.add_argument("--semantic", action="store_true", help="voxel-wise argmax instead of voting")
    voting(sp)
    sp.add_argument("--threshold", type=float, default=0.5)
    common(sp)
    sp.set_defaults(func=cmd_segment)

    sp = sub.add_parser("eval", help="score label volumes against ground truth")
    sp.add_argument("--pred", nargs="+", required=True)
    sp.add_argument("--gt", nargs="+", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--hist")
    common(sp)
    sp.set_defaults(func=cmd_eval)
    return p


def _apply_config(parser, argv):
    """Re-parse with the --config file's values as defaults of the chosen subcommand."""
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    try:
        cfg = json.loads(Path(args.config).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{args.config}: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"{args.config}: expected a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    unknown = sorted(set(cfg) - known - {"config"})
    if unknown:
        raise UsageError(f"{args.config}: unknown options {unknown}")
    sub.set_defaults(**cfg)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except (UsageError, ArchError, PhantomSpecError) as exc:
        print(f"houghcnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"houghcnn: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, VolumeFormatError, WeightFileError, HoughDBError) as exc:
        print(f"houghcnn: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"houghcnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
