"""Exact and inverted-file L2 search over 128-d reference descriptors.

Descriptors are stored as u8, f16 or f32.  Distances are always accumulated in
float32 through ``|a|^2 + |b|^2 - 2 a.b``; for integer-valued descriptors (u8
inputs, in any storage dtype) every partial sum stays below 2**24, so the
result equals the exact integer squared distance.

Ties are broken by ``(reference image id, keypoint ordinal)`` ascending.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import (
    BadMagic,
    CorruptStream,
    DimensionMismatch,
    EmptyCorpus,
    IoFailure,
    ParamOutOfRange,
    TooFewVectors,
    VersionMismatch,
)
from .sift import DESCRIPTOR_DIM, FeatureSet

DTYPES = {"u8": np.uint8, "f16": np.float16, "f32": np.float32}
_DTYPE_CODES = {"u8": 0, "f16": 1, "f32": 2}
_MAGIC = b"LDX1"
_VERSION = 1
_BLOCK = 16384
KMEANS_ITERS = 25


class Hit(NamedTuple):
    query: int
    image_id: str
    keypoint: int
    distance: float  # squared L2


@dataclass
class DescriptorIndex:
    dtype: str
    blob: np.ndarray  # (count, 128) in storage dtype
    image_ids: list[str]
    owner: np.ndarray  # (count, 2) uint32: image ordinal, keypoint ordinal
    centroids: np.ndarray | None = None  # (nlist, 128) float32
    list_offsets: np.ndarray | None = None  # (nlist + 1,) uint64
    list_entries: np.ndarray | None = None  # (count,) uint32
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def dim(self) -> int:
        return DESCRIPTOR_DIM

    @property
    def count(self) -> int:
        return len(self.blob)

    @property
    def partitioned(self) -> bool:
        return self.centroids is not None

    @property
    def nlist(self) -> int:
        return 0 if self.centroids is None else len(self.centroids)

    def inverted_list(self, i: int) -> np.ndarray:
        return self.list_entries[int(self.list_offsets[i]):int(self.list_offsets[i + 1])]

    def _norms(self) -> np.ndarray:
        if "norms" not in self._cache:
            self._cache["norms"] = _sq_norms(self.blob)
        return self._cache["norms"]

    def _tie_rank(self) -> np.ndarray:
        """Position of each ordinal in (image id, keypoint ordinal) order."""
        if "rank" not in self._cache:
            id_rank = np.empty(len(self.image_ids), dtype=np.int64)
            id_rank[np.argsort(np.array(self.image_ids, dtype=object), kind="stable")] = np.arange(len(self.image_ids))
            order = np.lexsort((self.owner[:, 1], id_rank[self.owner[:, 0]]))
            rank = np.empty(self.count, dtype=np.int64)
            rank[order] = np.arange(self.count)
            self._cache["rank"] = rank
        return self._cache["rank"]


def _sq_norms(x: np.ndarray) -> np.ndarray:
    xf = x.astype(np.float32)
    return np.einsum("ij,ij->i", xf, xf)


def _sq_dists(queries: np.ndarray, q_norms: np.ndarray, base: np.ndarray, b_norms: np.ndarray) -> np.ndarray:
    d = q_norms[:, None] + b_norms[None, :] - 2.0 * (queries @ base.astype(np.float32).T)
    return np.maximum(d, 0.0, out=d)


def _stack_features(feature_sets: Sequence[FeatureSet], dtype: str):
    if dtype not in DTYPES:
        raise ParamOutOfRange(f"dtype must be one of {sorted(DTYPES)}")
    blobs, owners, ids = [], [], []
    for i, fs in enumerate(feature_sets):
        desc = np.asarray(fs.descriptors)
        if desc.ndim != 2 or desc.shape[1] != DESCRIPTOR_DIM:
            raise DimensionMismatch(f"{fs.image_id}: descriptors must be (n, {DESCRIPTOR_DIM})")
        ids.append(fs.image_id)
        blobs.append(desc)
        owners.append(np.column_stack([np.full(len(desc), i, np.uint32), np.arange(len(desc), dtype=np.uint32)]))
    if not blobs or sum(len(b) for b in blobs) == 0:
        raise EmptyCorpus("no descriptors to index")
    # float16 conversion rounds to nearest even; u8 values are exact in all dtypes
    blob = np.concatenate(blobs).astype(DTYPES[dtype])
    return blob, ids, np.concatenate(owners)


def build_flat(feature_sets: Sequence[FeatureSet], dtype: str = "u8") -> DescriptorIndex:
    blob, ids, owner = _stack_features(feature_sets, dtype)
    return DescriptorIndex(dtype, blob, ids, owner)


def kmeans(x: np.ndarray, k: int, seed: int = 0, iters: int = KMEANS_ITERS) -> np.ndarray:
    """Lloyd's algorithm seeded from ``k`` distinct sample rows; empty clusters keep their centroid."""
    x = np.asarray(x, dtype=np.float32)
    rng = np.random.default_rng(seed)
    centroids = x[np.sort(rng.choice(len(x), size=k, replace=False))].copy()
    x_norms = _sq_norms(x)
    prev = None
    for _ in range(iters):
        assign = _nearest_centroid(x, x_norms, centroids)
        if prev is not None and np.array_equal(assign, prev):
            break
        prev = assign
        sums = np.zeros_like(centroids, dtype=np.float64)
        np.add.at(sums, assign, x)
        counts = np.bincount(assign, minlength=k)
        nonempty = counts > 0
        centroids[nonempty] = (sums[nonempty] / counts[nonempty, None]).astype(np.float32)
    return centroids


def _nearest_centroid(x: np.ndarray, x_norms: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    c_norms = _sq_norms(centroids)
    out = np.empty(len(x), dtype=np.int64)
    for start in range(0, len(x), _BLOCK):
        stop = start + _BLOCK
        d = _sq_dists(x[start:stop].astype(np.float32), x_norms[start:stop], centroids, c_norms)
        out[start:stop] = np.argmin(d, axis=1)
    return out


def build_partitioned(feature_sets: Sequence[FeatureSet], dtype: str = "u8", nlist: int | None = None,
                      train_size: int = 65536, seed: int = 0) -> DescriptorIndex:
    """Inverted-file index: k-means coarse quantiser + one list per centroid.

    ``nlist`` defaults to ceil(sqrt(count)).
    """
    blob, ids, owner = _stack_features(feature_sets, dtype)
    count = len(blob)
    nlist = nlist or int(math.ceil(math.sqrt(count)))
    if nlist < 1 or count < nlist:
        raise TooFewVectors(f"need at least nlist={nlist} vectors, have {count}")
    rng = np.random.default_rng(seed)
    sample_n = max(nlist, min(train_size, count))
    sample = blob if sample_n >= count else blob[np.sort(rng.choice(count, size=sample_n, replace=False))]
    centroids = kmeans(sample, nlist, seed=seed)
    assign = _nearest_centroid(blob.astype(np.float32), _sq_norms(blob), centroids)
    entries = np.argsort(assign, kind="stable").astype(np.uint32)
    offsets = np.zeros(nlist + 1, dtype=np.uint64)
    offsets[1:] = np.cumsum(np.bincount(assign, minlength=nlist))
    return DescriptorIndex(dtype, blob, ids, owner, centroids, offsets, entries)


def _select_topk(rows: np.ndarray, ords: np.ndarray, dists: np.ndarray, k: int, rank: np.ndarray):
    """Keep the first ``k`` (distance, tie rank) entries per row; returns sorted triples."""
    order = np.lexsort((rank[ords], dists, rows))
    rows, ords, dists = rows[order], ords[order], dists[order]
    starts = np.searchsorted(rows, rows, side="left")
    keep = (np.arange(len(rows)) - starts) < k
    return rows[keep], ords[keep], dists[keep]


def _block_candidates(q: np.ndarray, q_norms: np.ndarray, cols: np.ndarray, index: DescriptorIndex, k: int):
    """Per-query candidates from one column block, ties at the k-th distance included."""
    d = _sq_dists(q, q_norms, index.blob[cols], index._norms()[cols])
    if d.shape[1] > k:
        kth = np.partition(d, k - 1, axis=1)[:, k - 1:k]
        r, c = np.nonzero(d <= kth)
    else:
        r, c = np.nonzero(np.ones_like(d, dtype=bool))
    return r, cols[c], d[r, c]


def search_arrays(index: DescriptorIndex, queries: np.ndarray, k: int = 1, nprobe: int = 8):
    """Top-k ordinals and squared distances, shape (n_queries, min(k, count)) each."""
    queries = np.asarray(queries)
    if queries.ndim != 2 or queries.shape[1] != DESCRIPTOR_DIM:
        raise DimensionMismatch(f"queries must be (n, {DESCRIPTOR_DIM}), got {queries.shape}")
    if k < 1 or nprobe < 1:
        raise ParamOutOfRange("k and nprobe must be >= 1")
    k = min(k, index.count)
    nq = len(queries)
    if nq == 0:
        return np.zeros((0, k), np.int64), np.zeros((0, k), np.float32)
    q = queries.astype(np.float32)
    q_norms = _sq_norms(q)
    rank = index._tie_rank()
    parts = []
    if not index.partitioned:
        for start in range(0, index.count, _BLOCK):
            cols = np.arange(start, min(start + _BLOCK, index.count))
            r, o, d = _block_candidates(q, q_norms, cols, index, k)
            parts.append(_select_topk(r, o, d, k, rank))
    else:
        nprobe = min(nprobe, index.nlist)
        cd = _sq_dists(q, q_norms, index.centroids, _sq_norms(index.centroids))
        probes = np.argsort(cd, axis=1, kind="stable")[:, :nprobe]
        for lst in np.unique(probes):
            qrows = np.nonzero((probes == lst).any(axis=1))[0]
            cols = index.inverted_list(int(lst)).astype(np.int64)
            if len(cols) == 0:
                continue
            r, o, d = _block_candidates(q[qrows], q_norms[qrows], cols, index, k)
            parts.append(_select_topk(qrows[r], o, d, k, rank))
    rows = np.concatenate([p[0] for p in parts])
    ords = np.concatenate([p[1] for p in parts])
    dists = np.concatenate([p[2] for p in parts])
    rows, ords, dists = _select_topk(rows, ords, dists, k, rank)
    out_o = np.full((nq, k), -1, dtype=np.int64)
    out_d = np.full((nq, k), np.inf, dtype=np.float32)
    slot = np.arange(len(rows)) - np.searchsorted(rows, rows, side="left")
    out_o[rows, slot] = ords
    out_d[rows, slot] = dists
    return out_o, out_d


def search(index: DescriptorIndex, queries: np.ndarray, k: int = 1, nprobe: int = 8) -> list[list[Hit]]:
    """Per-query top-k hits sorted by ascending squared distance."""
    ords, dists = search_arrays(index, queries, k, nprobe)
    out = []
    for qi in range(len(ords)):
        hits = []
        for o, d in zip(ords[qi], dists[qi]):
            if o < 0:
                continue
            img, kp = index.owner[o]
            hits.append(Hit(qi, index.image_ids[img], int(kp), float(d)))
        out.append(hits)
    return out


# --------------------------------------------------------------------------
# LDX1 files


def save(index: DescriptorIndex, path) -> None:
    parts = [_MAGIC, struct.pack("<IBHQ", _VERSION, _DTYPE_CODES[index.dtype], DESCRIPTOR_DIM, index.count)]
    parts.append(struct.pack("<I", len(index.image_ids)))
    for ident in index.image_ids:
        raw = ident.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
    parts.append(np.ascontiguousarray(index.owner, dtype="<u4").tobytes())
    parts.append(np.ascontiguousarray(index.blob, dtype=np.dtype(DTYPES[index.dtype]).newbyteorder("<")).tobytes())
    parts.append(struct.pack("<I", index.nlist))
    if index.partitioned:
        parts.append(np.ascontiguousarray(index.centroids, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(index.list_offsets, dtype="<u8").tobytes())
        parts.append(np.ascontiguousarray(index.list_entries, dtype="<u4").tobytes())
    try:
        Path(path).write_bytes(b"".join(parts))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptStream("truncated index file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, n: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * n), dtype=dt).copy()


def load(path) -> DescriptorIndex:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    rd = _Reader(data)
    if rd.take(4) != _MAGIC:
        raise BadMagic("not an LDX1 index file")
    version, code, dim, count = rd.unpack("<IBHQ")
    if version != _VERSION:
        raise VersionMismatch(f"index version {version}, expected {_VERSION}")
    if dim != DESCRIPTOR_DIM:
        raise DimensionMismatch(f"index dim {dim}")
    dtype = {v: k for k, v in _DTYPE_CODES.items()}[code]
    (n_ids,) = rd.unpack("<I")
    ids = []
    for _ in range(n_ids):
        (n,) = rd.unpack("<I")
        ids.append(rd.take(n).decode("utf-8"))
    owner = rd.array("<u4", 2 * count).reshape(count, 2).astype(np.uint32)
    blob_dt = np.dtype(DTYPES[dtype]).newbyteorder("<")
    blob = rd.array(blob_dt.str, count * dim).reshape(count, dim).astype(DTYPES[dtype])
    (nlist,) = rd.unpack("<I")
    index = DescriptorIndex(dtype, blob, ids, owner)
    if nlist:
        index.centroids = rd.array("<f4", nlist * dim).reshape(nlist, dim).astype(np.float32)
        index.list_offsets = rd.array("<u8", nlist + 1).astype(np.uint64)
        index.list_entries = rd.array("<u4", count).astype(np.uint32)
    return index
