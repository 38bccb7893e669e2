"""Command-line pipeline: synth, train, segment, eval, sweep, visualize.

Every command takes a YAML config plus a few overrides, writes its outputs
under a self-describing run directory, and is rerunnable: the same config
and seed reproduce byte-identical artifacts.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import blob_detect, doc_io, eval_metrics, feature_grid, line_extract, pair_gen
from . import siamese_net
from .config import RunConfig, dump_config, load_config

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_PARTIAL = 2


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "patch_size", None) is not None:
        cfg.patch_size = args.patch_size
    if getattr(args, "central_window", None) is not None:
        cfg.central_window = args.central_window
    if getattr(args, "out", None) is not None:
        cfg.run_dir = str(args.out)
    return cfg


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def cmd_synth(args) -> int:
    cfg = _load_run_config(args)
    out = Path(cfg.run_dir)
    n_pages = args.pages if args.pages is not None else cfg.synth.n_pages
    for sub in ("images", "labels", "xml"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    entries = []
    for i in range(n_pages):
        page_seed_seq = np.random.SeedSequence([cfg.seed & 0xFFFFFFFF, 0xD0C5, i])
        page_seed = int(page_seed_seq.generate_state(1)[0])
        page = doc_io.generate_synthetic_page(
            cfg.synth.synth_config(page_seed), f"page_{i:04d}"
        )
        pid = page.image.id
        doc_io.save_image(page.image.pixels, out / "images" / f"{pid}.png")
        doc_io.save_label_map(page.labels, out / "labels" / f"{pid}.png")
        doc_io.write_page_xml(
            page.lines, (page.image.height, page.image.width), out / "xml" / f"{pid}.xml"
        )
        entries += [f"images/{pid}.png", f"labels/{pid}.png", f"xml/{pid}.xml"]

    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "sha256"])
        for rel in entries:
            writer.writerow([rel, _sha256(out / rel)])
    dump_config(cfg, out / "config_used.yaml")
    print(f"wrote {n_pages} pages to {out}")
    return EXIT_OK


def _load_corpus(corpus: Path) -> list[doc_io.DocumentImage]:
    images = sorted((corpus / "images").glob("*.png"))
    if not images:
        images = sorted(corpus.glob("*.png"))
    return [doc_io.load_document(p) for p in images]


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    corpus = Path(args.corpus)
    docs = _load_corpus(corpus)
    if not docs:
        print(f"error: no corpus images under {corpus}", file=sys.stderr)
        return EXIT_FAILURE
    out = Path(cfg.run_dir)
    out.mkdir(parents=True, exist_ok=True)

    dataset = pair_gen.build_pair_dataset(docs, cfg.pair_config(), seed=cfg.seed)
    if args.export_pairs:
        pair_gen.export_pairs(dataset, args.export_pairs)

    if args.resume:
        model = siamese_net.load_checkpoint(args.resume)
    else:
        model = siamese_net.init_model(cfg.arch_config(), seed=cfg.seed)
    best, log = siamese_net.train(model, dataset.train, dataset.val, cfg.train_config())

    ckpt = Path(args.checkpoint) if args.checkpoint else out / "model.lwck"
    siamese_net.save_checkpoint(best, ckpt)
    log.write_csv(out / "trainlog.csv")
    dump_config(cfg, out / "config_used.yaml")
    print(
        f"trained {len(log.epochs)} epochs; best epoch {log.best_epoch} "
        f"val_acc {best.best_val_acc:.4f}; checkpoint {ckpt}"
    )
    return EXIT_OK


def segment_page(
    model: siamese_net.ModelState,
    doc: doc_io.DocumentImage,
    cfg: RunConfig,
    out_dir: Path,
    save_intermediate: bool = True,
    grid_cache: Path | None = None,
) -> line_extract.SegmentationResult:
    """Run the three pipeline stages for one page and write its artifacts."""
    gcfg = cfg.grid_config()
    page_dir = out_dir / doc.id
    page_dir.mkdir(parents=True, exist_ok=True)

    cache_file = (grid_cache or page_dir) / f"{doc.id}_grid.npy"
    if cache_file.exists():
        _, offsets = feature_grid.pad_document(doc, gcfg)
        grid = feature_grid.load_grid(cache_file, doc.id, gcfg, offsets)
    else:
        grid = feature_grid.extract_grid(model, doc, gcfg, batch=cfg.grid_batch)
        if save_intermediate:
            feature_grid.save_grid(grid, cache_file)

    proj = blob_detect.pca_project(grid)
    prgb = blob_detect.to_pseudo_rgb(proj, doc.id)
    ink = doc_io.binarize(doc)
    bmap = blob_detect.threshold_blob_lines(
        prgb, ink, gcfg, min_blob_cells=cfg.blobs.min_blob_cells
    )
    seg = line_extract.extract_lines(ink, bmap, k_neighbors=cfg.graph.k_neighbors)

    upscale = np.kron(prgb.pixels, np.ones((gcfg.window, gcfg.window, 1)))
    doc_io.save_image(upscale[: doc.height, : doc.width], page_dir / "pseudo_rgb.png")
    doc_io.save_image(bmap.mask.astype(np.float64), page_dir / "blobs.png")
    doc_io.save_label_map(bmap.labels, page_dir / "blob_labels.png")
    doc_io.save_label_map(seg.label_map, page_dir / "labels.png")
    payload = {
        "page_id": doc.id,
        "fallback": seg.fallback,
        "blob_count": bmap.count,
        "lines": {
            str(lab): {"pixels": seg.pixel_counts[lab], "polygon": seg.polygons[lab]}
            for lab in sorted(seg.pixel_counts)
        },
    }
    with open(page_dir / "lines.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    gt_lines = [
        doc_io.LineGroundTruth(f"l{lab}", seg.polygons[lab]) for lab in sorted(seg.polygons)
    ]
    doc_io.write_page_xml(gt_lines, (doc.height, doc.width), page_dir / "page.xml")
    return seg


def cmd_segment(args) -> int:
    cfg = _load_run_config(args)
    model = siamese_net.load_checkpoint(args.checkpoint)
    src = Path(args.input)
    if src.is_dir():
        paths = sorted((src / "images").glob("*.png")) or sorted(src.glob("*.png"))
    else:
        paths = [src]
    if not paths:
        print(f"error: no input pages under {src}", file=sys.stderr)
        return EXIT_FAILURE
    out = Path(cfg.run_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config_used.yaml")

    def run_one(path: Path) -> str:
        doc = doc_io.load_document(path)
        segment_page(model, doc, cfg, out, save_intermediate=args.save_intermediate)
        return doc.id

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            done = list(pool.map(run_one, paths))
    else:
        done = [run_one(p) for p in paths]
    print(f"segmented {len(done)} page(s) into {out}")
    return EXIT_OK


def _find_pred_labels(pred_dir: Path, page_id: str) -> Path | None:
    for candidate in (pred_dir / page_id / "labels.png", pred_dir / f"{page_id}.png"):
        if candidate.exists():
            return candidate
    return None


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    pred_dir = Path(args.pred)
    gt_dir = Path(args.gt)
    gt_paths = sorted(gt_dir.glob("*.png"))
    if not gt_paths:
        gt_paths = sorted((gt_dir / "labels").glob("*.png"))
        gt_dir = gt_dir / "labels"
    if not gt_paths:
        print(f"error: no ground-truth label maps under {args.gt}", file=sys.stderr)
        return EXIT_FAILURE

    rows = []
    missing = []
    for gt_path in gt_paths:
        pid = gt_path.stem
        pred_path = _find_pred_labels(pred_dir, pid)
        if pred_path is None:
            missing.append(pid)
            continue
        gt = doc_io.load_label_map(gt_path)
        pred = doc_io.load_label_map(pred_path)
        report = eval_metrics.evaluate_page(pred, gt, theta=cfg.metrics.theta)
        n_pred = len(np.unique(pred[pred > 0]))
        n_gt = len(np.unique(gt[gt > 0]))
        rows.append((pid, report.liu, report.piu, n_pred, n_gt))

    out_path = Path(args.out) if args.out else Path(cfg.run_dir) / "metrics.csv"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["page_id", "liu", "piu", "pred_lines", "gt_lines"])
        for pid, liu, piu, n_pred, n_gt in rows:
            writer.writerow([pid, f"{liu:.6f}", f"{piu:.6f}", n_pred, n_gt])
        if rows:
            writer.writerow(
                [
                    "mean",
                    f"{np.mean([r[1] for r in rows]):.6f}",
                    f"{np.mean([r[2] for r in rows]):.6f}",
                    "",
                    "",
                ]
            )
    for pid in missing:
        print(f"missing prediction for page '{pid}'", file=sys.stderr)
    if rows:
        print(
            f"{len(rows)} page(s): mean LIU {np.mean([r[1] for r in rows]):.4f} "
            f"mean PIU {np.mean([r[2] for r in rows]):.4f} -> {out_path}"
        )
    return EXIT_PARTIAL if missing else (EXIT_OK if rows else EXIT_FAILURE)


def cmd_sweep(args) -> int:
    cfg = _load_run_config(args)
    values = [int(v) for v in args.values.split(",")]
    out = Path(cfg.run_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in values:
        sweep_cfg = _load_run_config(args)
        sweep_cfg.run_dir = str(out / f"{args.axis.replace('-', '_')}_{value}")
        if args.axis == "central-window":
            sweep_cfg.central_window = value
            ckpt = Path(args.checkpoint)
        else:
            sweep_cfg.patch_size = value
            ckpt = Path(args.checkpoint.replace("{p}", str(value)))
        if not ckpt.exists():
            print(f"error: missing checkpoint for {args.axis}={value}: {ckpt}", file=sys.stderr)
            return EXIT_FAILURE
        model = siamese_net.load_checkpoint(ckpt)
        seg_args = argparse.Namespace(
            config=args.config,
            seed=cfg.seed,
            patch_size=sweep_cfg.patch_size,
            central_window=sweep_cfg.central_window,
            out=sweep_cfg.run_dir,
            checkpoint=str(ckpt),
            input=args.input,
            jobs=args.jobs,
            save_intermediate=True,
        )
        code = cmd_segment(seg_args)
        if code != EXIT_OK:
            return code
        eval_args = argparse.Namespace(
            config=args.config,
            seed=cfg.seed,
            patch_size=sweep_cfg.patch_size,
            central_window=sweep_cfg.central_window,
            out=None,
            pred=sweep_cfg.run_dir,
            gt=args.gt,
        )
        eval_args.out = str(Path(sweep_cfg.run_dir) / "metrics.csv")
        code = cmd_eval(eval_args)
        if code == EXIT_FAILURE:
            return code
        with open(eval_args.out) as fh:
            last = list(csv.reader(fh))[-1]
        rows.append((value, float(last[1]), float(last[2])))

    table = out / "sweep.csv"
    with open(table, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([args.axis.replace("-", "_"), "mean_liu", "mean_piu"])
        for value, liu, piu in rows:
            writer.writerow([value, f"{liu:.6f}", f"{piu:.6f}"])
    print(f"sweep table -> {table}")
    return EXIT_OK


def cmd_visualize(args) -> int:
    cfg = _load_run_config(args)
    model = siamese_net.load_checkpoint(args.checkpoint)
    doc = doc_io.load_document(args.image)
    out = Path(cfg.run_dir)
    out.mkdir(parents=True, exist_ok=True)
    p = model.arch.input_side
    if doc.height < p or doc.width < p:
        print(f"error: page smaller than patch size {p}", file=sys.stderr)
        return EXIT_FAILURE
    if args.patch_origin:
        r, c = (int(v) for v in args.patch_origin.split(","))
    else:
        r, c = (doc.height - p) // 2, (doc.width - p) // 2
    patch = doc.pixels[r : r + p, c : c + p]
    sal, degenerate = feature_grid.saliency_map(model, patch)
    if degenerate:
        warnings.warn("saliency activations are rank-deficient; channels padded")
    doc_io.save_image(patch, out / f"{doc.id}_patch_{r}_{c}.png")
    doc_io.save_image(sal, out / f"{doc.id}_saliency_{r}_{c}.png")
    print(f"saliency map -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lineweave", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default=True):
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--patch-size", type=int, dest="patch_size")
        p.add_argument("--central-window", type=int, dest="central_window")
        if out_default:
            p.add_argument("--out", help="output/run directory")

    p = sub.add_parser("synth", help="generate a synthetic corpus with ground truth")
    common(p)
    p.add_argument("--pages", type=int, help="number of pages (default from config)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the pair-similarity model on a corpus")
    common(p)
    p.add_argument("--corpus", required=True, help="corpus directory from `synth`")
    p.add_argument("--checkpoint", help="checkpoint output path (.lwck)")
    p.add_argument("--resume", help="checkpoint to continue training from")
    p.add_argument("--export-pairs", help="also materialize the pair dataset here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", help="run the full segmentation pipeline on pages")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="page image or corpus directory")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument(
        "--save-intermediate",
        default=True,
        type=lambda v: v.lower() not in ("0", "false", "no"),
        help="persist the embedding grid tensor (default true)",
    )
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", help="score predictions against ground truth (LIU/PIU)")
    common(p, out_default=False)
    p.add_argument("--pred", required=True, help="segment output directory")
    p.add_argument("--gt", required=True, help="ground-truth label map directory")
    p.add_argument("--out", help="metrics CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="evaluate across patch sizes or central windows")
    common(p)
    p.add_argument("--axis", choices=("patch-size", "central-window"), required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument(
        "--checkpoint",
        required=True,
        help="checkpoint path; use {p} placeholder for patch-size sweeps",
    )
    p.add_argument("--input", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("visualize", help="patch saliency false-color map")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--patch-origin", help="row,col of the patch top-left")
    p.set_defaults(func=cmd_visualize)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, siamese_net.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
