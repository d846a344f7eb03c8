"""Command-line interface.

Exit codes: 0 success, 1 input or validation error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, checkpoint
from .checkpoint import CheckpointError
from .dataset_io import (HscError, HscPaths, SyntheticSceneSpec, read_hsc, synth_scene,
                         write_class_map, write_hsc)
from .gradcheck import OP_NAMES, op_suite
from .metrics import (MetricsReport, aggregate_runs, write_confusion_csv, write_metrics_json)
from .network import (PUBLISHED_IP_PARAMETERS, NumericError, build_mixedsn, count_parameters,
                      shape_trace)
from .pipeline import (RunOptions, patches_from_record, preprocessing_record, prepare,
                       resolve_bands, run)
from .preprocess import HsiCube, LabelMap, extract_patches, pca_reduce, stratified_split
from .tensor import ShapeError, deterministic_mode
from .trainer import evaluate, predict, write_history_csv

log = logging.getLogger("mixedsn")


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------- helpers


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def dataset_paths(args) -> HscPaths:
    if not args.cube:
        raise UsageError("--cube is required")
    paths = HscPaths.from_cube(args.cube, args.labels, args.manifest)
    for p in (paths.cube, paths.labels, paths.manifest):
        if not p.exists():
            raise FileNotFoundError(f"missing input file: {p}")
    return paths


def load_dataset(args) -> tuple[HscPaths, HsiCube, LabelMap]:
    paths = dataset_paths(args)
    cube, labels = read_hsc(paths)
    return paths, cube, labels


def digests(paths: HscPaths) -> dict:
    return {str(p.name): sha256(p) for p in (paths.manifest, paths.cube, paths.labels)}


def out_dir(args) -> Path:
    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def options_from_args(args) -> RunOptions:
    if getattr(args, "replay", None):
        record = json.loads(Path(args.replay).read_text())
        return RunOptions(**record["options"])
    return RunOptions(
        profile=args.profile, bands=args.bands, window=args.window, widths=args.widths,
        train_frac=args.train_frac, seed=args.seed, epochs=args.epochs, batch=args.batch,
        lr=args.lr, weight_decay=args.weight_decay, dropout=args.dropout,
        pad_mode=args.pad_mode, rounding=args.rounding, deterministic=args.deterministic,
    )


def write_run_manifest(path: Path, command: str, opts: RunOptions, paths: HscPaths | None,
                       extra: dict | None = None) -> None:
    record = {"tool": "mixedsn", "version": __version__, "command": command,
              "options": opts.to_dict(), "inputs": digests(paths) if paths else {}}
    if extra:
        record.update(extra)
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _check_fraction(f: float) -> float:
    if not 0.0 < f < 1.0:
        raise UsageError(f"train fraction must lie in (0, 1), got {f}")
    return f


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    spec = SyntheticSceneSpec(height=args.height, width=args.width, bands=args.bands_raw,
                              n_classes=args.classes, noise_std=args.noise,
                              blobs_per_class=args.blobs)
    cube, labels = synth_scene(spec, args.seed)
    paths = write_hsc(cube, labels, args.out)
    print(f"wrote {paths.manifest}, {paths.cube}, {paths.labels} "
          f"({labels.labeled_count()} labeled pixels)")
    return 0


def cmd_pca(args) -> int:
    opts = options_from_args(args)
    paths, cube, labels = load_dataset(args)
    reduced = pca_reduce(cube, resolve_bands(opts, cube))
    d = out_dir(args)
    out = write_hsc(HsiCube(reduced.values.astype(np.float32)), labels, d / "reduced")
    (d / "pca.json").write_text(json.dumps({
        "bands": reduced.bands, "retained_variance": reduced.retained_variance,
        "eigenvalues": reduced.eigenvalues.tolist(),
    }, indent=2) + "\n")
    write_run_manifest(d / "run_manifest.json", "pca", opts, paths)
    print(f"kept {reduced.bands} of {cube.bands} bands, retained variance "
          f"{reduced.retained_variance:.6f}; wrote {out.manifest}")
    return 0


def cmd_patch(args) -> int:
    opts = options_from_args(args)
    paths, cube, labels = load_dataset(args)
    patches = extract_patches(cube.values, labels, opts.window, opts.pad_mode)
    d = out_dir(args)
    with open(d / "patches.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", "label"])
        for (r, c), lab in zip(patches.centers, patches.labels):
            w.writerow([int(r), int(c), int(lab)])
    print(f"{len(patches)} patches of {opts.window}x{opts.window} ({opts.pad_mode} mode)")
    return 0


def cmd_split(args) -> int:
    opts = options_from_args(args)
    _check_fraction(opts.train_frac)
    paths, cube, labels = load_dataset(args)
    patches = extract_patches(np.zeros((*labels.ids.shape, 1)), labels, opts.window, opts.pad_mode)
    plan = stratified_split(patches.labels, opts.train_frac, opts.seed, opts.rounding,
                            n_classes=labels.n_classes)
    d = out_dir(args)
    record = {"fraction": plan.fraction, "seed": plan.seed, "rounding": plan.rounding,
              "classes": []}
    print(f"{'class':<28}{'samples':>8}{'train':>8}{'test':>8}")
    for c, (n_tr, n_te) in plan.counts().items():
        name = labels.class_names[c - 1]
        print(f"{name:<28}{n_tr + n_te:>8}{n_tr:>8}{n_te:>8}")
        record["classes"].append({"id": c, "name": name, "train": plan.train[c].tolist(),
                                  "test": plan.test[c].tolist()})
    (d / "split.json").write_text(json.dumps(record) + "\n")
    return 0


def cmd_train(args) -> int:
    opts = options_from_args(args)
    _check_fraction(opts.train_frac)
    paths, cube, labels = load_dataset(args)
    d = out_dir(args)
    prep, net, params, history, report, cm = run(cube, labels, opts,
                                                 with_test_curve=args.test_curve)
    record = preprocessing_record(prep, opts)
    checkpoint.save(d / "checkpoint.mxsn", net, params, opts.seed, extra=record)
    write_history_csv(history, d / "history.csv")
    write_run_manifest(d / "run_manifest.json", "train", opts, paths,
                       {"split_counts": {str(k): v for k, v in prep.split.counts().items()}})
    print(f"trained {opts.epochs} epochs; final loss {history[-1]['train_loss']:.6f}; "
          f"test OA {report.oa:.4f}")
    return 0


def _load_for_eval(args):
    paths, cube, labels = load_dataset(args)
    net, params, manifest = checkpoint.load(args.checkpoint)
    record = manifest["extra"]
    if labels.n_classes != net.n_classes:
        raise CheckpointError(
            f"checkpoint has {net.n_classes} classes, dataset declares {labels.n_classes}")
    return paths, cube, labels, net, params, record


def cmd_eval(args) -> int:
    paths, cube, labels, net, params, record = _load_for_eval(args)
    opts = RunOptions(**record["options"])
    patches = patches_from_record(cube, labels, record)
    plan = stratified_split(patches.labels, opts.train_frac, opts.seed, opts.rounding,
                            n_classes=labels.n_classes)
    idx = {"test": plan.test_indices, "train": plan.train_indices,
           "all": np.arange(len(patches))}[args.subset]
    with deterministic_mode(opts.deterministic):
        _, cm = evaluate(net, params, patches, idx)
    report = MetricsReport.from_confusion(cm)
    d = out_dir(args)
    write_metrics_json(report, d / "metrics.json")
    write_confusion_csv(cm, labels.class_names, d / "confusion.csv")
    print(json.dumps(report.to_dict()))
    return 0


def cmd_predict_map(args) -> int:
    paths, cube, labels, net, params, record = _load_for_eval(args)
    patches = patches_from_record(cube, labels, record, include_unlabeled=args.all_pixels)
    opts = RunOptions(**record["options"])
    with deterministic_mode(opts.deterministic):
        pred = predict(net, params, patches, np.arange(len(patches)))
    grid = np.zeros(labels.ids.shape, dtype=np.int64)
    grid[patches.centers[:, 0], patches.centers[:, 1]] = pred
    d = out_dir(args)
    n = write_class_map(grid, net.n_classes, d / "map.ppm")
    print(f"wrote {d / 'map.ppm'} ({grid.shape[1]}x{grid.shape[0]}, {n} bytes)")
    return 0


def cmd_paramcount(args) -> int:
    opts = options_from_args(args)
    net, params = build_mixedsn(opts.profile, n_classes=args.classes, bands=opts.bands,
                                window=opts.window, width_scale=opts.width_scale())
    total, table = count_parameters(params, net)
    print(f"{'layer':<10}{'output shape':<22}{'params':>10}")
    for row in table:
        print(f"{row['layer']:<10}{str(row['output']):<22}{row['count']:>10,d}")
    print(f"{'total':<32}{total:>10,d}")
    delta = total - PUBLISHED_IP_PARAMETERS
    print(f"published IP total {PUBLISHED_IP_PARAMETERS:,d}; delta {delta:+,d} "
          f"({100.0 * delta / PUBLISHED_IP_PARAMETERS:+.2f}%)")
    if args.trace:
        for row in shape_trace(net):
            print(f"  {row['layer']:<10}{row['kind']:<8}{row['shape']}")
    return 0


def cmd_gradcheck(args) -> int:
    if args.dtype != "f64":
        raise UsageError("gradient checks run in float64 only (--dtype f64)")
    wanted = OP_NAMES if args.ops == "all" else tuple(args.ops.split(","))
    unknown = set(wanted) - set(OP_NAMES)
    if unknown:
        raise UsageError(f"unknown ops: {sorted(unknown)}")
    reports = [r for r in op_suite(args.seed, args.h, args.tol) if r.name in wanted]
    for r in reports:
        print(r.line())
    return 0 if all(r.passed for r in reports) else 2


def cmd_sweep(args) -> int:
    fractions = [float(f) for f in args.fractions.split(",")]
    if len(fractions) < 2:
        raise UsageError("sweep needs at least two fractions")
    if len(set(fractions)) != len(fractions):
        raise UsageError(f"duplicate fractions in {fractions}")
    for f in fractions:
        _check_fraction(f)
    base = options_from_args(args)
    paths, cube, labels = load_dataset(args)
    d = out_dir(args)
    rows = []
    for f in fractions:
        reports = []
        for k in range(args.n_seeds):
            opts = RunOptions(**{**base.to_dict(), "train_frac": f, "seed": base.seed + k})
            *_, report, _ = run(cube, labels, opts)
            reports.append(report)
        agg = aggregate_runs(reports)
        rows.append([f] + [v for key in ("oa", "aa", "kappa") for v in agg[key]] + [args.n_seeds])
        print(f"fraction {f:.2f}: OA {agg['oa'][0]:.4f} +- {agg['oa'][1]:.4f}")
    with open(d / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fraction", "oa_mean", "oa_std", "aa_mean", "aa_std",
                    "kappa_mean", "kappa_std", "n_seeds"])
        for r in rows:
            w.writerow([f"{r[0]:.6f}"] + [f"{v:.6f}" for v in r[1:7]] + [r[7]])
    write_run_manifest(d / "run_manifest.json", "sweep", base, paths,
                       {"fractions": fractions, "n_seeds": args.n_seeds})
    return 0


# ---------------------------------------------------------------- parser


def _add_data_flags(p):
    p.add_argument("--cube", help="raw BSQ float32 cube file")
    p.add_argument("--labels", help="raw uint16 label file (default: <cube>.lbl)")
    p.add_argument("--manifest", help="HSC manifest JSON (default: <cube>.json)")


def _add_run_flags(p):
    p.add_argument("--profile", default="ip", choices=["ip", "pu", "sa", "bw", "custom"])
    p.add_argument("--bands", type=int, default=None, help="PCA bands T (profile default)")
    p.add_argument("--window", type=int, default=25, help="spatial window S")
    p.add_argument("--widths", default="full", help="full, halved, quartered or a scale factor")
    p.add_argument("--train-frac", type=float, default=0.30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=1e-6)
    p.add_argument("--dropout", type=float, default=None, help="profile default")
    p.add_argument("--pad-mode", default="border", choices=["border", "interior"])
    p.add_argument("--rounding", default="largest-remainder",
                   choices=["largest-remainder", "half-up"])
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--out-dir", default="out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixedsn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic HSC scene")
    p.add_argument("--out", required=True, help="output stem")
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--bands-raw", type=int, default=8)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--blobs", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    for name, func, helptext in (("pca", cmd_pca, "PCA-reduce a cube"),
                                 ("patch", cmd_patch, "list patch centres"),
                                 ("split", cmd_split, "stratified train/test split"),
                                 ("train", cmd_train, "train a MixedSN model")):
        p = sub.add_parser(name, help=helptext)
        _add_data_flags(p)
        _add_run_flags(p)
        if name == "train":
            p.add_argument("--replay", help="run manifest whose options to reuse")
            p.add_argument("--test-curve", action="store_true",
                           help="record test accuracy every epoch")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="metrics of a checkpoint on a split")
    _add_data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--subset", default="test", choices=["test", "train", "all"])
    p.add_argument("--out-dir", default="out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict-map", help="write a PPM classification map")
    _add_data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--all-pixels", action="store_true", help="also classify unlabeled pixels")
    p.add_argument("--out-dir", default="out")
    p.set_defaults(func=cmd_predict_map)

    p = sub.add_parser("paramcount", help="per-layer parameter table")
    _add_run_flags(p)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--trace", action="store_true", help="also print the shape trace")
    p.set_defaults(func=cmd_paramcount)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every op")
    p.add_argument("--ops", default="all")
    p.add_argument("--dtype", default="f64")
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="OA/AA/Kappa against training fraction")
    _add_data_flags(p)
    _add_run_flags(p)
    p.add_argument("--fractions", default="0.1,0.2,0.3,0.4,0.5")
    p.add_argument("--n-seeds", type=int, default=1)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, HscError, CheckpointError, ShapeError, UsageError,
            ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
