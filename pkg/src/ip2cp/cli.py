"""Command-line pipeline: synth -> encode -> mine -> train -> fit -> predict -> evaluate -> plot.

Each stage is an independent subcommand exchanging data through files, so
runs are resumable and every stage is testable on its own. Exit codes:
0 success, 1 usage/configuration error, 2 data or validation error,
3 numerical failure (non-finite loss). Logs go to stderr; data goes to
files or stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import classifier, embedder, encoder, ingest, metrics, patches, raster, synth
from .errors import DataError, NumericsError

logger = logging.getLogger("ip2cp")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route argparse failures through exit code 1
        raise _UsageError(message)


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def _load_entry(entry: ingest.ManifestEntry):
    """Load one manifest entry as (pre, post, mask), naming the entry on failure."""
    try:
        pre = raster.load_image(entry.pre)
        post = raster.load_image(entry.post)
        mask = ingest.load_label_mask(entry.labels, post.height, post.width)
        if pre.data.shape != post.data.shape:
            raise DataError(
                f"pre {pre.data.shape} and post {post.data.shape} sizes differ"
            )
        return pre, post, mask
    except DataError as exc:
        raise DataError(f"entry {entry.id!r}: {exc}") from None


def _miner_config(args) -> patches.MinerConfig:
    try:
        return patches.MinerConfig(
            patch_size=args.patch_size,
            delta1=args.delta1,
            delta2=args.delta2,
            stride=args.stride,
        )
    except ValueError as exc:
        raise _UsageError(str(exc)) from None


def _read_predictions(path: Path) -> dict[str, raster.BinaryLabel]:
    rows = {}
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != "id\tlabel":
        raise DataError(f"{path}: expected a TSV with header 'id<TAB>label'")
    for lineno, line in enumerate(lines[1:], 2):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected 2 tab-separated fields")
        rows[parts[0]] = raster.BinaryLabel.from_text(parts[1])
    return rows


def _read_truth_labels(path: Path) -> dict[str, raster.BinaryLabel]:
    """Patch-set manifest (or its directory) -> id to label."""
    if path.is_dir():
        path = path / patches.PATCH_MANIFEST
    rows = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise DataError(f"{path}:{lineno}: expected 5 tab-separated fields")
        rows[parts[0]] = raster.BinaryLabel.from_text(parts[1])
    return rows


def scatter_svg(points: np.ndarray, labels: list[raster.BinaryLabel]) -> str:
    """Deterministic 2-D scatter: no-damage red, with-damage green.

    Axes span the data bounding box plus a 5% margin on each side.
    """
    width, height, pad = 640, 480, 48
    if points.shape[0]:
        x0, y0 = points.min(axis=0)
        x1, y1 = points.max(axis=0)
    else:
        x0 = y0 = 0.0
        x1 = y1 = 1.0
    span_x = x1 - x0 or 1.0
    span_y = y1 - y0 or 1.0
    x0, x1 = x0 - 0.05 * span_x, x1 + 0.05 * span_x
    y0, y1 = y0 - 0.05 * span_y, y1 + 0.05 * span_y
    sx = (width - 2 * pad) / (x1 - x0)
    sy = (height - 2 * pad) / (y1 - y0)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" '
        f'height="{height - 2 * pad}" fill="none" stroke="black"/>',
        f'<text x="{pad}" y="{height - pad + 16}" font-size="11">{x0:.4g}</text>',
        f'<text x="{width - pad}" y="{height - pad + 16}" font-size="11" '
        f'text-anchor="end">{x1:.4g}</text>',
        f'<text x="{pad - 4}" y="{height - pad}" font-size="11" '
        f'text-anchor="end">{y0:.4g}</text>',
        f'<text x="{pad - 4}" y="{pad + 10}" font-size="11" text-anchor="end">{y1:.4g}</text>',
    ]
    for (x, y), label in zip(points, labels):
        px = pad + (x - x0) * sx
        py = height - pad - (y - y0) * sy
        color = "red" if label == raster.BinaryLabel.NO_DAMAGE else "green"
        parts.append(f'<circle cx="{px:.3f}" cy="{py:.3f}" r="3" fill="{color}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_encode(args) -> int:
    manifest = ingest.load_manifest(args.manifest)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for entry in manifest.entries:
        pre, post, mask = _load_entry(entry)
        z = encoder.ip2cp_encode(pre, post, mask)
        raster.save_image(z.image, out / f"{entry.id}_ip2cp.png")
        raster.save_mask(
            raster.LabelMask(z.ooi.astype(np.uint8)), out / f"{entry.id}_ooi.png"
        )
        logger.info("encoded %s", entry.id)
    return EXIT_OK


def cmd_mine(args) -> int:
    cfg = _miner_config(args)
    manifest = ingest.load_manifest(args.manifest)
    out = Path(args.out_dir)
    print(f"split,{patches.STATS_CSV_HEADER}")
    for split in ("train", "test"):
        mined: list[patches.LabeledPatch] = []
        candidates = 0
        for entry in manifest.split(split):
            pre, post, mask = _load_entry(entry)
            z = encoder.ip2cp_encode(pre, post, mask)
            candidates += patches.count_windows(post.height, post.width, cfg)
            mined.extend(patches.mine_patches(z, mask, post, cfg, image_id=entry.id))
        patches.write_patch_set(mined, out / split)
        nd = sum(1 for p in mined if p.label == raster.BinaryLabel.NO_DAMAGE)
        wd = len(mined) - nd
        print(
            f"{split},{cfg.patch_size},{cfg.delta1!r},{cfg.delta2!r},"
            f"{nd},{wd},{candidates - len(mined)}"
        )
    return EXIT_OK


def cmd_stats(args) -> int:
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s]
        deltas = []
        for pair in args.deltas.split(","):
            if not pair:
                continue
            d1, d2 = pair.split(":")
            deltas.append((float(d1), float(d2)))
        if not sizes or not deltas:
            raise ValueError("empty --sizes or --deltas")
    except ValueError as exc:
        raise _UsageError(f"bad --sizes/--deltas: {exc}") from None
    manifest = ingest.load_manifest(args.manifest)
    dataset = []
    for entry in manifest.entries:
        pre, post, mask = _load_entry(entry)
        dataset.append((encoder.ip2cp_encode(pre, post, mask), mask, post))
    rows = patches.sweep_patch_stats(dataset, sizes, deltas)
    sys.stdout.write(patches.stats_to_csv(rows))
    return EXIT_OK


def cmd_train(args) -> int:
    patch_set = patches.read_patch_set(args.patches)
    try:
        cfg = embedder.TrainConfig(
            margin=args.margin,
            epochs=args.epochs,
            learning_rate=args.lr,
            seed=args.seed,
            embed_dim=args.embed_dim,
        )
    except ValueError as exc:
        raise _UsageError(str(exc)) from None
    net, stats = embedder.train(patch_set, cfg)
    embedder.save_net(net, args.model_out)
    if args.stats_out:
        Path(args.stats_out).write_text(stats.to_csv(), encoding="utf-8")
    if stats.epoch_losses:
        logger.info(
            "trained %d epochs, final mean loss %.6f", args.epochs, stats.final_loss
        )
    return EXIT_OK


def cmd_fit_svm(args) -> int:
    patch_set = patches.read_patch_set(args.patches)
    if not patch_set:
        raise DataError("empty patch set")
    net = embedder.load_net(args.model)
    points = embedder.embed_matrix(net, patch_set)
    labels = [p.label for p in patch_set]
    model = classifier.fit_svm(points, labels, classifier.SvmConfig(seed=args.seed))
    classifier.save_svm(model, args.svm_out)
    errors = sum(
        1
        for row, lbl in zip(points, labels)
        if classifier.svm_predict(model, row) != lbl
    )
    print(f"training errors: {errors}/{len(labels)}")
    return EXIT_OK


def cmd_predict(args) -> int:
    net = embedder.load_net(args.model)
    model = classifier.load_svm(args.svm)
    if args.patches:
        patch_set = patches.read_patch_set(args.patches)
    else:
        pre_path, post_path, mask_path = args.image_triple
        pre = raster.load_image(pre_path)
        post = raster.load_image(post_path)
        mask = ingest.load_label_mask(Path(mask_path), post.height, post.width)
        cfg = _miner_config(args)
        z = encoder.ip2cp_encode(pre, post, mask)
        patch_set = patches.mine_patches(z, mask, post, cfg, image_id=Path(pre_path).stem)
    lines = ["id\tlabel"]
    if patch_set:
        points = embedder.embed_matrix(net, patch_set)
        for patch, row in zip(patch_set, points):
            label = classifier.svm_predict(model, row)
            lines.append(f"{patch.patch_id}\t{label.text}")
    Path(args.out).write_text(
        "".join(line + "\n" for line in lines), encoding="utf-8", newline="\n"
    )
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if args.mode == "patch":
        preds = _read_predictions(Path(args.pred))
        truths = _read_truth_labels(Path(args.truth))
        if set(preds) != set(truths):
            raise DataError(
                f"prediction ids do not match truth ids "
                f"({len(preds)} predictions vs {len(truths)} truths)"
            )
        ids = sorted(preds)
        cm = metrics.confusion(
            [int(preds[i]) for i in ids], [int(truths[i]) for i in ids], k=2
        )
        report = metrics.patch_report(cm)
    else:
        pred_mask = raster.load_mask(args.pred)
        truth_mask = raster.load_mask(args.truth)
        report = metrics.pixel_report(pred_mask, truth_mask)
    Path(args.report).write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(f"f1: {report['f1']:.4f}")
    return EXIT_OK


def cmd_plot(args) -> int:
    net = embedder.load_net(args.model)
    if net.embed_dim != 2:
        raise _UsageError(
            f"scatter plots need a 2-D embedding, model has embed_dim {net.embed_dim}"
        )
    patch_set = patches.read_patch_set(args.patches)
    points = embedder.embed_matrix(net, patch_set)
    labels = [p.label for p in patch_set]
    csv_lines = ["id,label,x,y"]
    for patch, (x, y) in zip(patch_set, points):
        csv_lines.append(f"{patch.patch_id},{patch.label.text},{x!r},{y!r}")
    Path(args.out_csv).write_text(
        "".join(line + "\n" for line in csv_lines), encoding="utf-8", newline="\n"
    )
    Path(args.out_svg).write_text(scatter_svg(points, labels), encoding="utf-8")
    return EXIT_OK


def cmd_synth(args) -> int:
    path = Path(args.config)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed JSON: {exc.msg} (line {exc.lineno})") from exc
    known = {
        "image_size", "building_count", "building_size_range", "damage_probability",
        "damage_intensity", "noise_sigma", "seed", "scenes", "train_split",
    }
    unknown = set(doc) - known
    if unknown:
        raise _UsageError(f"unknown config keys: {sorted(unknown)}")
    scenes = doc.pop("scenes", 10)
    split = doc.pop("train_split", 0.8)
    if "building_size_range" in doc:
        doc["building_size_range"] = tuple(doc["building_size_range"])
    try:
        cfg = synth.SceneConfig(**doc)
        synth.make_dataset(cfg, scenes, split, args.out_dir)
    except ValueError as exc:
        raise _UsageError(str(exc)) from None
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser wiring
# ---------------------------------------------------------------------------


def _add_miner_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--patch-size", type=int, default=64)
    p.add_argument("--delta1", type=float, default=0.12)
    p.add_argument("--delta2", type=float, default=0.04)
    p.add_argument("--stride", type=int, default=None)


def build_parser() -> _Parser:
    parser = _Parser(prog="ip2cp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="write fused change images for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("mine", help="mine labeled patches split by train/test")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    _add_miner_flags(p)
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("stats", help="sweep patch sizes and thresholds")
    p.add_argument("--manifest", required=True)
    p.add_argument("--sizes", required=True, help="comma-separated patch sizes")
    p.add_argument("--deltas", required=True, help="comma-separated d1:d2 pairs")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train the contrastive embedder")
    p.add_argument("--patches", required=True)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--margin", type=float, default=2.0)
    p.add_argument("--embed-dim", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--model-out", required=True)
    p.add_argument("--stats-out", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fit-svm", help="fit the linear classifier on embeddings")
    p.add_argument("--patches", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--svm-out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fit_svm)

    p = sub.add_parser("predict", help="classify patches or a pre/post/mask triple")
    p.add_argument("--model", required=True)
    p.add_argument("--svm", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--patches")
    group.add_argument("--image-triple", nargs=3, metavar=("PRE", "POST", "MASK"))
    p.add_argument("--out", required=True)
    _add_miner_flags(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--mode", choices=("patch", "pixel"), default="patch")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", help="emit the 2-D embedding scatter (CSV + SVG)")
    p.add_argument("--model", required=True)
    p.add_argument("--patches", required=True)
    p.add_argument("--out-svg", required=True)
    p.add_argument("--out-csv", required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("synth", help="generate a synthetic dataset with ground truth")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericsError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
