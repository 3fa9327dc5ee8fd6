"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._validation import FundusQAError
from .adversarial import LossConfig, fields_from_dir, score_triples
from .isc import IscQualityModel
from .pipeline import (
    IMAGE_SUFFIXES,
    SplitSpec,
    apply_exclusions,
    build_manifest,
    compare_report,
    read_id_list,
    read_manifest,
    score_batch,
    score_images,
    split_dataset,
    write_manifest,
    write_scores,
)
from .raster import detect_fov, load_image
from .stats import auc, roc_curve, youden_threshold
from .vesselness import DEFAULT_VESSEL_THRESHOLD, FrangiParams, VesselSegmenter, load_vessel_tree, save_vessel_tree, segment_classical

log = logging.getLogger("fundus_qa")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _images_in(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise FundusQAError(f"not a directory: {directory}")
    return [p for p in sorted(directory.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES]


def _counts(text):
    try:
        parts = [int(p) for p in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated integers, got {text!r}") from None
    if len(parts) != 3 or min(parts) < 0:
        raise argparse.ArgumentTypeError(f"expected three non-negative integers, got {text!r}")
    return parts


def _seed(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("seed must be non-negative")
    return value


# ---------------------------------------------------------------------------
# Subcommands


def cmd_manifest(args):
    manifest = build_manifest(args.retina_dir, args.vessel_dir, args.synthetic_dir, args.grades)
    if args.exclude_list:
        manifest = apply_exclusions(manifest, read_id_list(args.exclude_list))
    write_manifest(args.out, manifest)
    for w in manifest.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"{len(manifest)} entries ({len(manifest.active)} usable) -> {args.out}")


def cmd_split(args):
    manifest = read_manifest(args.manifest)
    if args.exclude_list:
        manifest = apply_exclusions(manifest, read_id_list(args.exclude_list))
    parts = split_dataset(manifest, SplitSpec(*args.counts, seed=args.seed))
    prefix = args.out_prefix or str(Path(args.manifest).with_suffix(""))
    for name, part in zip(("train", "val", "test"), parts):
        path = f"{prefix}_{name}.jsonl"
        write_manifest(path, part)
        print(f"{name}: {len(part)} -> {path}")


def cmd_segment(args):
    params = FrangiParams()
    inputs = _images_in(args.input)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    threshold = args.threshold
    if args.truth_dir:
        truths = {p.stem: p for p in _images_in(args.truth_dir)}
        paired = [p for p in inputs if p.stem in truths]
        if not paired:
            raise FundusQAError("no input image has a reference vessel mask")
        seg = VesselSegmenter().fit([load_image(p) for p in paired],
                                    [load_vessel_tree(truths[p.stem]) for p in paired])
        threshold = seg.threshold_
        print(f"youden threshold {threshold!r} (J = {seg.youden_j_:.4f})")
    for p in inputs:
        img = load_image(p)
        tree = segment_classical(img, detect_fov(img, args.fov_threshold), params, threshold)
        save_vessel_tree(out / f"{p.stem}.png", tree)
    print(f"{len(inputs)} vessel trees -> {out}")


def _score_command(args, metric, model=None):
    if args.manifest:
        manifest = read_manifest(args.manifest)
        if args.exclude_list:
            manifest = apply_exclusions(manifest, read_id_list(args.exclude_list))
        rows = score_batch(manifest, metric, model, args.out, role=args.role,
                           include_excluded=args.include_excluded)
    else:
        items = [(p.stem, str(p), False) for p in _images_in(args.input)]
        rows = score_images(items, metric, model)
        write_scores(args.out, rows)
    failed = sum(1 for r in rows if r["error"])
    print(f"{len(rows)} rows ({failed} failed) -> {args.out}")


def cmd_quality_qv(args):
    _score_command(args, "qv")


def cmd_quality_isc(args):
    model = IscQualityModel.from_file(args.model)
    _score_command(args, "isc", model)


def cmd_isc_train(args):
    good = [load_image(p) for p in _images_in(args.good)]
    bad = [load_image(p) for p in _images_in(args.bad)]
    if not good or not bad:
        raise FundusQAError("need images in both the good and the bad directory")
    model = IscQualityModel(
        n_clusters=args.clusters,
        C=args.c_reg,
        epochs=args.epochs,
        max_pixels_per_image=args.max_pixels,
        random_state=args.seed,
    ).fit(good + bad, np.r_[np.ones(len(good), int), np.zeros(len(bad), int)])
    model.save(args.out)
    print(f"trained on {len(good)} good + {len(bad)} bad images -> {args.out}")


def cmd_roc(args):
    with open(args.scores, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        for col in (args.scores_col, args.labels_col):
            if col not in cols:
                raise FundusQAError(f"{args.scores}: missing column {col!r}")
        scores, labels = [], []
        for row in reader:
            if row[args.scores_col] == "":
                continue
            scores.append(float(row[args.scores_col]))
            labels.append(int(float(row[args.labels_col])))
    curve = roc_curve(scores, labels)
    threshold, j = youden_threshold(curve)
    print(f"auc {auc(curve)!r}")
    print(f"youden_threshold {threshold!r}")
    print(f"youden_j {j!r}")


def cmd_loss(args):
    manifest = read_manifest(args.manifest)
    entries = [(e.id, e.vessel_path, e.retina_path, e.synthetic_path or "") for e in manifest.active]
    supplier = fields_from_dir(args.fields_dir) if args.fields_dir else None
    cfg = LossConfig(lambda_l1=args.lam)
    scores = score_triples(entries, cfg, supplier)
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "l1", "adversarial", "combined", "baseline_discriminator"])
            for r in scores.results:
                w.writerow([r.id, repr(r.l1), repr(r.adversarial), repr(r.combined), int(r.baseline_discriminator)])
    for err in scores.errors:
        print(f"error: {err['id']}: {err['error']}", file=sys.stderr)
    print(f"lambda {cfg.lambda_l1!r}")
    print(f"pairs {len(scores.results)} errors {len(scores.errors)}")
    print(f"mean_l1 {scores.mean_l1!r}")
    print(f"mean_adversarial {scores.mean_adversarial!r}")
    print(f"mean_combined {scores.mean_combined!r}")
    if not scores.results:
        raise FundusQAError("no entry could be scored")


def cmd_report(args):
    table = None
    for metric, real_csv, syn_csv in args.pair:
        part = compare_report(real_csv, syn_csv, args.alpha, metric)
        table = part if table is None else table.extend(part)
    sys.stdout.write(table.render())
    if args.out:
        table.to_csv(args.out)
    if table.errors:
        for e in table.errors:
            print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


# ---------------------------------------------------------------------------


def _add_score_inputs(p):
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--in", dest="input", help="directory of PNG/PPM images")
    src.add_argument("--manifest", help="LDJSON manifest")
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--role", choices=["retina", "synthetic"], default="retina",
                   help="which manifest image to score (default: retina)")
    p.add_argument("--exclude-list", help="file with one id per line to exclude")
    p.add_argument("--include-excluded", action="store_true", help="also score excluded entries")


def build_parser():
    parser = _Parser(prog="fundus-qa", description="Retinal image quality metrics and evaluation tools")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    p = sub.add_parser("manifest", help="pair retina/vessel(/synthetic) images into a manifest")
    p.add_argument("--retina-dir", required=True)
    p.add_argument("--vessel-dir", required=True)
    p.add_argument("--synthetic-dir")
    p.add_argument("--grades", help="CSV with id,grade columns; grade > 2 is excluded")
    p.add_argument("--exclude-list", help="file with one id per line to exclude")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_manifest)

    p = sub.add_parser("split", help="seeded train/val/test split of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--counts", type=_counts, required=True, help="train,val,test e.g. 614,155,177")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--exclude-list")
    p.add_argument("--out-prefix", help="output prefix (default: manifest path without suffix)")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("segment", help="classical Frangi vessel segmentation")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True, help="output directory for 1-bit PNG vessel trees")
    thr = p.add_mutually_exclusive_group()
    thr.add_argument("--threshold", type=float, default=DEFAULT_VESSEL_THRESHOLD)
    thr.add_argument("--truth-dir", help="reference masks; picks the Youden-optimal threshold")
    p.add_argument("--fov-threshold", type=float, default=0.06)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("quality", help="no-reference quality scores")
    qsub = p.add_subparsers(dest="metric", parser_class=_Parser, metavar="METRIC")
    q = qsub.add_parser("qv", help="vesselness-weighted anisotropy score")
    _add_score_inputs(q)
    q.set_defaults(func=cmd_quality_qv)
    q = qsub.add_parser("isc", help="image structure clustering score")
    _add_score_inputs(q)
    q.add_argument("--model", required=True, help="ISCM1 model file from isc-train")
    q.set_defaults(func=cmd_quality_isc)

    p = sub.add_parser("isc-train", help="train the ISC clustering + SVM model")
    p.add_argument("--good", required=True, help="directory of acceptable-quality images")
    p.add_argument("--bad", required=True, help="directory of degraded images")
    p.add_argument("--out", required=True)
    p.add_argument("--clusters", type=int, default=5)
    p.add_argument("--c-reg", type=float, default=1000.0)
    p.add_argument("--epochs", type=int, default=2000)
    p.add_argument("--max-pixels", type=int, default=50000, help="FOV pixels per image used for k-means")
    p.add_argument("--seed", type=_seed, default=0)
    p.set_defaults(func=cmd_isc_train)

    p = sub.add_parser("roc", help="AUC and Youden threshold from a score CSV")
    p.add_argument("--scores", required=True)
    p.add_argument("--scores-col", default="score")
    p.add_argument("--labels-col", default="label")
    p.set_defaults(func=cmd_roc)

    p = sub.add_parser("loss", help="adversarial + L1 loss over (vessel, real, synthetic) triples")
    p.add_argument("--manifest", required=True)
    p.add_argument("--fields-dir", help="directory with <id>_real.csv / <id>_fake.csv grids")
    p.add_argument("--lambda", dest="lam", type=float, default=100.0)
    p.add_argument("--out", help="per-pair CSV")
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("report", help="real-vs-synthetic comparison table")
    p.add_argument("--pair", nargs=3, action="append", required=True, metavar=("METRIC", "REAL_CSV", "SYN_CSV"))
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out", help="table as CSV")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        code = args.func(args)
    except (FundusQAError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
