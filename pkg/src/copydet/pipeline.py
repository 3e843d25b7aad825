"""End-to-end wiring: corpus ingestion, reference database, and the three-branch query path."""

from __future__ import annotations

import dataclasses
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import globalsim, vecindex
from .errors import CopyDetError, MissingEmbeddings, MissingIndex, NoImagesFound, ParamOutOfRange
from .globalsim import EmbeddingStore, Projection
from .imaging import CropBox, ImageBuf, read_image, resize_min_edge, to_grayscale
from .matcher import SIFT_EDGE, MatcherConfig, QueryVariant, ScoredPair, fuse, local_recall, match_with_flip
from .preprocess import DetectorConfig, detect_pasted_region, load_crop_boxes, route_variants
from .sift import FeatureSet, SiftParams, extract
from .vecindex import DescriptorIndex

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg"}


@dataclass
class PipelineConfig:
    corpus_dir: str | None = None
    query_dir: str | None = None
    index_file: str | None = None
    embedding_file: str | None = None
    projection_file: str | None = None
    output_dir: str = "out"
    ground_truth: str | None = None
    crop_boxes: str | None = None  # external detector output; overrides the heuristic
    detector_mode: str = "heuristic"  # heuristic | external | off
    attack_manifest: str | None = None
    branches: tuple = ("global", "local", "crop")
    index_mode: str = "flat"  # flat | partitioned
    index_dtype: str = "u8"
    nlist: int | None = None
    nprobe: int = 8
    sift: SiftParams = field(default_factory=SiftParams)
    matcher: MatcherConfig = field(default_factory=MatcherConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    threads: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.threads < 1:
            raise ParamOutOfRange("threads must be >= 1")
        self.branches = tuple(self.branches)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        data = dict(data)
        nested = {"sift": SiftParams, "matcher": MatcherConfig, "detector": DetectorConfig}
        for key, typ in nested.items():
            if key in data and isinstance(data[key], dict):
                data[key] = typ(**data[key])
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ParamOutOfRange(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def discover_images(root) -> list[tuple[str, Path]]:
    """(image id, path) for every png/jpg under ``root``, sorted; the id is the relative stem."""
    root = Path(root)
    found = []
    for path in sorted(root.rglob("*")):
        if path.is_file() and path.suffix.lower() in IMAGE_EXTENSIONS:
            found.append((path.relative_to(root).with_suffix("").as_posix(), path))
    return found


def parallel_map(fn: Callable, items: Sequence, threads: int) -> list:
    """``map`` over a thread pool; results in input order regardless of pool size."""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def extract_image(image: ImageBuf, params: SiftParams, image_id: str = "") -> FeatureSet:
    return extract(resize_min_edge(to_grayscale(image), SIFT_EDGE), params, image_id)


def extract_corpus(entries: Sequence[tuple[str, Path]], params: SiftParams,
                   threads: int = 1) -> tuple[list[FeatureSet], list[tuple[str, str]]]:
    """Features for every decodable image; undecodable ones are skipped and reported."""
    if not entries:
        raise NoImagesFound("no images to extract")

    def work(entry):
        image_id, path = entry
        try:
            return extract_image(read_image(path), params, image_id), None
        except (CopyDetError, OSError) as exc:
            return None, (image_id, f"{type(exc).__name__}: {exc}")

    features, failures = [], []
    for fs, failure in parallel_map(work, list(entries), threads):
        if failure is not None:
            log.warning("skipping %s (%s)", *failure)
            failures.append(failure)
        else:
            features.append(fs)
    return features, failures


def build_index(features: Sequence[FeatureSet], cfg: PipelineConfig) -> DescriptorIndex:
    if cfg.index_mode == "partitioned":
        return vecindex.build_partitioned(features, cfg.index_dtype, cfg.nlist, seed=cfg.seed)
    if cfg.index_mode == "flat":
        return vecindex.build_flat(features, cfg.index_dtype)
    raise ParamOutOfRange(f"unknown index mode {cfg.index_mode!r}")


def embed_images(entries: Sequence[tuple[str, ImageBuf]], projection: Projection, threads: int = 1) -> EmbeddingStore:
    vectors = parallel_map(lambda e: globalsim.embed(e[1], projection, e[0]), list(entries), threads)
    return EmbeddingStore.from_embeddings(vectors)


def features_from_index(index: DescriptorIndex) -> dict[str, FeatureSet]:
    """Per-reference descriptor sets recovered from the index blob (keypoint geometry is not stored)."""
    out = {}
    order = np.argsort(index.owner[:, 0], kind="stable")
    owners = index.owner[order, 0]
    bounds = np.searchsorted(owners, np.arange(len(index.image_ids) + 1))
    blob = index.blob
    for i, image_id in enumerate(index.image_ids):
        rows = order[bounds[i]:bounds[i + 1]]
        rows = rows[np.argsort(index.owner[rows, 1], kind="stable")]
        desc = np.clip(np.round(blob[rows].astype(np.float32)), 0, 255).astype(np.uint8)
        out[image_id] = FeatureSet(image_id, np.zeros((len(rows), 5), np.float32), desc)
    return out


@dataclass
class ReferenceDB:
    index: DescriptorIndex
    store: EmbeddingStore
    projection: Projection
    features: dict[str, FeatureSet] = field(default_factory=dict)

    def __post_init__(self):
        if not self.features:
            self.features = features_from_index(self.index)


def load_reference_db(cfg: PipelineConfig) -> ReferenceDB:
    if not cfg.index_file or not Path(cfg.index_file).exists():
        raise MissingIndex(f"index file not found: {cfg.index_file}")
    index = vecindex.load(cfg.index_file)
    projection = Projection.load(cfg.projection_file) if cfg.projection_file else Projection.identity()
    if cfg.embedding_file:
        if not Path(cfg.embedding_file).exists():
            raise MissingEmbeddings(f"embedding file not found: {cfg.embedding_file}")
        store = globalsim.load_embeddings(cfg.embedding_file)
    else:
        # baseline mode: embed the corpus on the fly
        if not cfg.corpus_dir:
            raise MissingEmbeddings("no embedding file and no corpus_dir for baseline embedding")
        entries = [(i, read_image(p)) for i, p in discover_images(cfg.corpus_dir)]
        store = embed_images(entries, projection, cfg.threads)
    return ReferenceDB(index, store, projection)


def detect_box(image: ImageBuf, image_id: str, cfg: PipelineConfig, external: dict[str, CropBox] | None) -> CropBox | None:
    if cfg.detector_mode == "off":
        return None
    if external is not None and (cfg.detector_mode == "external" or image_id in external):
        box = external.get(image_id)
        return box if box is not None and box.fits(image.width, image.height) else None
    if min(image.width, image.height) < 32:
        return None
    return detect_pasted_region(to_grayscale(image), cfg.detector)


def score_query(query_id: str, image: ImageBuf, db: ReferenceDB, cfg: PipelineConfig,
                external: dict[str, CropBox] | None = None) -> list[ScoredPair]:
    """Preprocess -> global recall + local recall on original/crop -> per-branch scoring -> fusion."""
    m = cfg.matcher
    routed = route_variants(image, detect_box(image, query_id, cfg, external))
    original = QueryVariant(image, cfg.sift, query_id)
    variants = {"local": original}
    if routed.detected:
        variants["crop"] = QueryVariant(routed.local_inputs[1], cfg.sift, query_id)
        variants["global"] = variants["crop"]
    else:
        variants["global"] = original

    global_cands = local_cands = crop_cands = None
    if "global" in cfg.branches:
        emb = globalsim.embed(routed.global_input, db.projection, query_id)
        global_cands = [ref for ref, _ in globalsim.topk_global(db.store, emb, m.global_k, m.global_threshold)]
    if "local" in cfg.branches:
        local_cands = _local_candidates(variants["local"], db, cfg)
    if "crop" in cfg.branches and routed.detected:
        crop_cands = _local_candidates(variants["crop"], db, cfg)

    cache: dict[tuple[int, str], int] = {}

    def scorer(branch: str, ref: str) -> int:
        variant = variants[branch]
        key = (id(variant), ref)
        if key not in cache:
            reference = db.features.get(ref)
            cache[key] = 0 if reference is None else match_with_flip(variant, reference, m.ratio_threshold)
        return cache[key]

    return fuse(query_id, global_cands, local_cands, crop_cands, scorer)


def _local_candidates(variant: QueryVariant, db: ReferenceDB, cfg: PipelineConfig) -> list[str]:
    fs = variant.features
    if len(fs) == 0:
        return []
    hits = vecindex.search(db.index, fs.descriptors, k=1, nprobe=cfg.nprobe)
    return [ref for ref, _ in local_recall(hits, cfg.matcher)]


def run_queries(queries: Sequence[tuple[str, Path]], db: ReferenceDB, cfg: PipelineConfig,
                progress: Callable[[int], None] | None = None) -> tuple[list[ScoredPair], list[tuple[str, str]]]:
    external = load_crop_boxes(cfg.crop_boxes) if cfg.crop_boxes else None

    def work(entry):
        query_id, path = entry
        try:
            return score_query(query_id, read_image(path), db, cfg, external), None
        except (CopyDetError, OSError) as exc:
            return [], (query_id, f"{type(exc).__name__}: {exc}")

    pairs, failures = [], []
    for result, failure in parallel_map(work, list(queries), cfg.threads):
        pairs.extend(result)
        if failure is not None:
            log.warning("query %s failed (%s)", *failure)
            failures.append(failure)
    return pairs, failures


def local_only(pairs: Iterable[ScoredPair]) -> list[ScoredPair]:
    """The submission the pipeline would emit with the global branch disabled."""
    out = []
    for p in pairs:
        if p.recalled[1] or p.recalled[2]:
            out.append(ScoredPair(p.query_id, p.reference_id, (0, p.scores[1], p.scores[2]),
                                  (False, p.recalled[1], p.recalled[2])))
    return out
