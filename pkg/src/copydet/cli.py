"""Command-line entry point: ``copydet <subcommand> [options]``.

Every subcommand accepts ``--config`` (JSON, keys as in PipelineConfig),
``--threads``, ``--seed`` and ``--output``.  Flags override config keys, and the
resolved config is written next to the outputs.  Exit status is 0 on success,
1 when some inputs were skipped, 2 on an error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import evalkit, globalsim, pipeline, sift, synth, vecindex
from .errors import CopyDetError, NoImagesFound, ParamOutOfRange
from .globalsim import Projection, TrainConfig
from .imaging import (ATTACK_KINDS, CropBox, ManifestRow, apply_attack, read_image, read_manifest, to_grayscale,
                      write_image, write_manifest, write_overlay_boxes)
from .pipeline import PipelineConfig
from .preprocess import detect_pasted_region

log = logging.getLogger("copydet")

# flag name -> PipelineConfig key, for flags that map one-to-one
_CONFIG_FLAGS = {
    "corpus": "corpus_dir", "queries": "query_dir", "index": "index_file", "embeddings": "embedding_file",
    "projection": "projection_file", "ground_truth": "ground_truth", "crop_boxes": "crop_boxes",
    "detector": "detector_mode", "index_mode": "index_mode", "dtype": "index_dtype", "nlist": "nlist",
    "nprobe": "nprobe", "manifest": "attack_manifest", "threads": "threads", "seed": "seed",
}


def _common(p: argparse.ArgumentParser, output_help: str) -> None:
    p.add_argument("--config", help="JSON config file with PipelineConfig keys")
    p.add_argument("--threads", type=int, help="worker threads (default 1)")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--output", help=output_help)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="copydet", description="Image copy detection toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="SIFT features for every image under a directory")
    _common(p, "feature archive (.sft)")
    p.add_argument("--corpus", help="image directory")

    p = sub.add_parser("index", help="build a descriptor index from a feature archive")
    _common(p, "index file (.ldx)")
    p.add_argument("--features", required=True, help="feature archive from `extract`")
    p.add_argument("--index-mode", choices=["flat", "partitioned"])
    p.add_argument("--dtype", choices=list(vecindex.DTYPES))
    p.add_argument("--nlist", type=int)

    p = sub.add_parser("embed", help="global embeddings for every image under a directory")
    _common(p, "embedding file (.gem)")
    p.add_argument("--corpus", help="image directory")
    p.add_argument("--projection", help="trained projection (.npz); identity when omitted")

    p = sub.add_parser("train", help="fit the global projection on augmented copies of a corpus")
    _common(p, "projection file (.npz)")
    p.add_argument("--corpus", help="image directory")
    p.add_argument("--copies", type=int, default=3, help="augmented copies per image")
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    p.add_argument("--margin", type=float, default=TrainConfig.margin)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--xbm-capacity", type=int, default=TrainConfig.xbm_capacity)

    p = sub.add_parser("detect-overlay", help="heuristic pasted-region boxes for a query directory")
    _common(p, "crop-box CSV")
    p.add_argument("--queries", help="query image directory")

    p = sub.add_parser("augment", help="write attacked query images plus ground truth")
    _common(p, "output directory")
    p.add_argument("--references", required=True, help="reference image directory")
    p.add_argument("--manifest", help="attack manifest CSV; generated when omitted")
    p.add_argument("--generate", type=int, default=0, help="number of queries to generate")
    p.add_argument("--kinds", default=",".join(synth.BENCH_KINDS), help="comma-separated attack kinds")
    p.add_argument("--distractors", help="directory of non-reference images to attack as distractor queries")

    p = sub.add_parser("synth", help="write procedural images (reference or distractor corpora)")
    _common(p, "output directory")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--prefix", default="ref")
    p.add_argument("--seed-offset", type=int, default=0, help="added to the seed of every image")

    p = sub.add_parser("run", help="full query pipeline: submission, optional PR curve")
    _common(p, "output directory")
    p.add_argument("--corpus", help="reference image directory (baseline embeddings)")
    p.add_argument("--queries", help="query image directory")
    p.add_argument("--index", help="index file")
    p.add_argument("--embeddings", help="embedding file; embed the corpus when omitted")
    p.add_argument("--projection", help="projection file")
    p.add_argument("--ground-truth", help="ground-truth CSV")
    p.add_argument("--crop-boxes", help="external crop-box CSV")
    p.add_argument("--detector", choices=["heuristic", "external", "off"])
    p.add_argument("--branches", help="comma-separated subset of global,local,crop")
    p.add_argument("--nprobe", type=int)

    p = sub.add_parser("eval", help="score a submission against ground truth")
    _common(p, "PR curve CSV")
    p.add_argument("--submission", required=True)
    p.add_argument("--ground-truth", required=True)
    return parser


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if getattr(args, "config", None) else PipelineConfig()
    updates = {}
    for flag, key in _CONFIG_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            updates[key] = value
    if getattr(args, "branches", None):
        branches = tuple(b.strip() for b in args.branches.split(",") if b.strip())
        if not set(branches) <= {"global", "local", "crop"}:
            raise ParamOutOfRange(f"unknown branch in {args.branches!r}")
        updates["branches"] = branches
    if args.command == "run" and args.output:
        updates["output_dir"] = args.output
    return dataclasses.replace(cfg, **updates)


def _write_config(cfg: PipelineConfig, output: Path, is_dir: bool) -> None:
    target = output / "config.json" if is_dir else output.with_name(output.name + ".config.json")
    target.parent.mkdir(parents=True, exist_ok=True)
    cfg.save(target)


def _require(value, what: str):
    if value is None:
        raise ParamOutOfRange(f"missing {what}")
    return value


def _images(directory) -> list:
    entries = pipeline.discover_images(_require(directory, "image directory"))
    if not entries:
        raise NoImagesFound(f"no png/jpg images under {directory}")
    return entries


def cmd_extract(args, cfg: PipelineConfig) -> int:
    out = Path(_require(args.output, "--output"))
    entries = _images(cfg.corpus_dir)
    t0 = time.perf_counter()
    features, failures = pipeline.extract_corpus(entries, cfg.sift, cfg.threads)
    out.parent.mkdir(parents=True, exist_ok=True)
    sift.save_feature_archive(out, features)
    _write_config(cfg, out, False)
    print(f"extracted {len(features)} images ({sum(len(f) for f in features)} keypoints) "
          f"in {time.perf_counter() - t0:.1f}s; skipped {len(failures)}")
    return 1 if failures else 0


def cmd_index(args, cfg: PipelineConfig) -> int:
    out = Path(_require(args.output, "--output"))
    index = pipeline.build_index(sift.load_feature_archive(args.features), cfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    vecindex.save(index, out)
    _write_config(cfg, out, False)
    print(f"indexed {index.count} descriptors from {len(index.image_ids)} images"
          + (f" in {index.nlist} lists" if index.partitioned else ""))
    return 0


def cmd_embed(args, cfg: PipelineConfig) -> int:
    out = Path(_require(args.output, "--output"))
    projection = Projection.load(cfg.projection_file) if cfg.projection_file else Projection.identity()
    entries = [(i, read_image(p)) for i, p in _images(cfg.corpus_dir)]
    store = pipeline.embed_images(entries, projection, cfg.threads)
    out.parent.mkdir(parents=True, exist_ok=True)
    globalsim.save_embeddings(store, out)
    _write_config(cfg, out, False)
    print(f"embedded {len(store)} images")
    return 0


def training_set(entries, copies: int, seed: int) -> tuple[np.ndarray, list[str]]:
    """Baseline features of every image and ``copies`` attacked versions of it, labelled by source."""
    rng = np.random.default_rng(seed)
    kinds = [k for k in synth.BENCH_KINDS if k != "overlay-paste"]  # the global branch sees crops, not pastes
    base, ids = [], []
    for image_id, path in entries:
        img = read_image(path)
        base.append(globalsim.baseline_embed(img))
        ids.append(image_id)
        for _ in range(copies):
            spec = synth.sample_attack(kinds[int(rng.integers(len(kinds)))], rng, (img.width, img.height))
            base.append(globalsim.baseline_embed(apply_attack(img, spec)[0]))
            ids.append(image_id)
    return np.stack(base), ids


def cmd_train(args, cfg: PipelineConfig) -> int:
    out = Path(_require(args.output, "--output"))
    base, ids = training_set(_images(cfg.corpus_dir), args.copies, cfg.seed)
    tc = TrainConfig(epochs=args.epochs, lr=args.lr, margin=args.margin, batch_size=args.batch_size,
                     xbm_capacity=args.xbm_capacity, seed=cfg.seed)
    result = globalsim.train_projection(base, ids, tc)
    out.parent.mkdir(parents=True, exist_ok=True)
    result.projection.save(out)
    _write_config(cfg, out, False)
    for epoch, loss in enumerate(result.loss_trace):
        print(f"epoch {epoch} loss {loss:.6f}")
    print(f"kept projection from epoch {result.best_epoch}")
    return 0


def cmd_detect_overlay(args, cfg: PipelineConfig) -> int:
    out = Path(_require(args.output, "--output"))

    def work(entry):
        image_id, path = entry
        gray = to_grayscale(read_image(path))
        if min(gray.width, gray.height) < 32:
            return image_id, None
        return image_id, detect_pasted_region(gray, cfg.detector)

    boxes = {i: b for i, b in pipeline.parallel_map(work, _images(cfg.query_dir), cfg.threads) if b is not None}
    out.parent.mkdir(parents=True, exist_ok=True)
    write_overlay_boxes(out, boxes)
    _write_config(cfg, out, False)
    print(f"detected {len(boxes)} pasted regions")
    return 0


def _attack_and_write(rows: list[ManifestRow], sources: dict, out_dir: Path, threads: int) -> dict[str, CropBox]:
    def work(row: ManifestRow):
        if row.source_id not in sources:
            raise ParamOutOfRange(f"{row.query_id}: unknown source {row.source_id!r}")
        img, record = apply_attack(read_image(sources[row.source_id]), row.attack, row.source_id)
        write_image(out_dir / f"{row.query_id}.png", img)
        return row.query_id, (record.box if record else None)

    return {q: b for q, b in pipeline.parallel_map(work, rows, threads) if b is not None}


def cmd_augment(args, cfg: PipelineConfig) -> int:
    out = Path(_require(args.output, "--output"))
    queries = out / "queries"
    queries.mkdir(parents=True, exist_ok=True)
    refs = dict(_images(args.references))
    if cfg.attack_manifest:
        rows = read_manifest(cfg.attack_manifest)
    else:
        kinds = tuple(k.strip() for k in args.kinds.split(",") if k.strip())
        if not set(kinds) <= set(ATTACK_KINDS):
            raise ParamOutOfRange(f"unknown attack kinds in {args.kinds!r}")
        if args.generate < 1:
            raise ParamOutOfRange("--generate must be >= 1 when no manifest is given")
        ids = sorted(refs)
        sizes = {i: read_image(refs[i]).pixels.shape[1::-1] for i in ids}
        rows = synth.attack_plan(ids, sizes, args.generate, cfg.seed, kinds)
    boxes = _attack_and_write(rows, refs, queries, cfg.threads)
    write_manifest(out / "manifest.csv", rows)
    evalkit.write_ground_truth([(r.query_id, r.source_id) for r in rows], out / "ground_truth.csv")
    if args.distractors:
        dist = dict(_images(args.distractors))
        ids = sorted(dist)
        sizes = {i: read_image(dist[i]).pixels.shape[1::-1] for i in ids}
        plan = synth.attack_plan(ids, sizes, len(ids), cfg.seed + 1, tuple(k for k in synth.BENCH_KINDS))
        drows = [ManifestRow(f"d{i:05d}", r.source_id, r.attack) for i, r in enumerate(plan)]
        boxes.update(_attack_and_write(drows, dist, queries, cfg.threads))
        write_manifest(out / "distractors.csv", drows)
    write_overlay_boxes(out / "overlay_boxes.csv", dict(sorted(boxes.items())))
    _write_config(cfg, out, True)
    print(f"wrote {len(rows)} attacked queries ({len(boxes)} overlays)")
    return 0


def cmd_synth(args, cfg: PipelineConfig) -> int:
    out = Path(_require(args.output, "--output"))
    out.mkdir(parents=True, exist_ok=True)
    width = max(3, len(str(args.count - 1)))

    def work(i):
        seed = cfg.seed * 1_000_003 + args.seed_offset + i
        w, h = synth.random_size(np.random.default_rng(seed))
        write_image(out / f"{args.prefix}{i:0{width}d}.png", synth.procedural_image(seed, w, h))

    pipeline.parallel_map(work, list(range(args.count)), cfg.threads)
    print(f"wrote {args.count} images")
    return 0


def cmd_run(args, cfg: PipelineConfig) -> int:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    db = pipeline.load_reference_db(cfg)
    queries = pipeline.discover_images(_require(cfg.query_dir, "query directory"))
    pairs, failures = pipeline.run_queries(queries, db, cfg)
    evalkit.write_submission(pairs, out / "submission.csv")
    _write_config(cfg, out, True)
    print(f"scored {len(queries)} queries -> {len(pairs)} pairs in {time.perf_counter() - t0:.1f}s")
    if cfg.ground_truth and pairs:
        curve = evalkit.micro_ap(pairs, evalkit.load_ground_truth(cfg.ground_truth))
        evalkit.write_pr_csv(curve, out / "pr_curve.csv")
        print(f"micro_ap={curve.micro_ap:.6f}")
    return 1 if failures else 0


def cmd_eval(args, cfg: PipelineConfig) -> int:
    curve = evalkit.micro_ap(evalkit.load_submission(args.submission), evalkit.load_ground_truth(args.ground_truth))
    if args.output:
        evalkit.write_pr_csv(curve, args.output)
    print(f"micro_ap={curve.micro_ap:.6f}")
    return 0


COMMANDS = {
    "extract": cmd_extract, "index": cmd_index, "embed": cmd_embed, "train": cmd_train,
    "detect-overlay": cmd_detect_overlay, "augment": cmd_augment, "synth": cmd_synth,
    "run": cmd_run, "eval": cmd_eval,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (CopyDetError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
