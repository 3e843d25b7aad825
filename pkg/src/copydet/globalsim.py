"""Global-embedding branch and its metric-learning kit.

A 512-d handcrafted base feature is mapped through a learnable linear
projection to a unit-norm 256-d embedding.  The projection is trained with a
triplet hinge loss over in-batch hard/semi-hard triplets plus negatives drawn
from a cross-batch memory (XBM) of earlier embeddings.
"""

from __future__ import annotations

import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import (
    BadMagic,
    CapacityTooSmall,
    CopyDetError,
    CorruptStream,
    DegenerateImage,
    DimensionMismatch,
    DivergedLoss,
    EmptyStore,
    IoFailure,
    NegativeDistance,
    NoValidTriplets,
    ParamOutOfRange,
    VersionMismatch,
    ZeroVector,
)
from .imaging import ImageBuf, LUMA_WEIGHTS

log = logging.getLogger(__name__)

EMBED_DIM = 256
BASE_DIM = 512
THUMB_SIZE = 4
HIST_BINS = 256
HOG_BINS = 52
BASE_EDGE = 128
_GEM_MAGIC = b"GEM1"
_GEM_VERSION = 1


# --------------------------------------------------------------------------
# base features


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def baseline_embed(img: ImageBuf) -> np.ndarray:
    """4x4x3 colour thumbnail (48) + 256-bin gray histogram + 2x2x52 gradient histogram (208)."""
    if min(img.width, img.height) < 2:
        raise DegenerateImage("baseline features need at least 2x2 pixels")
    px = img.pixels
    rgb = np.repeat(px, 3, axis=2) if px.shape[2] == 1 else px
    pil = Image.fromarray(rgb, mode="RGB")
    thumb = np.asarray(pil.resize((THUMB_SIZE, THUMB_SIZE), Image.BOX), dtype=np.float64).ravel() / 255.0

    scale = BASE_EDGE / min(img.width, img.height)
    if scale < 1:
        pil = pil.resize((max(2, round(img.width * scale)), max(2, round(img.height * scale))), Image.BILINEAR)
    gray = np.asarray(pil, dtype=np.float64) @ LUMA_WEIGHTS
    hist = np.bincount(np.clip(np.round(gray), 0, 255).astype(np.int64).ravel(), minlength=HIST_BINS)

    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), 2 * np.pi)
    bins = np.minimum((ang * HOG_BINS / (2 * np.pi)).astype(np.int64), HOG_BINS - 1)
    h, w = gray.shape
    cells = []
    for rows in (slice(0, h // 2), slice(h // 2, h)):
        for cols in (slice(0, w // 2), slice(w // 2, w)):
            cells.append(np.bincount(bins[rows, cols].ravel(), weights=mag[rows, cols].ravel(), minlength=HOG_BINS))
    hog = np.concatenate(cells)
    return np.concatenate([_unit(thumb), _unit(hist.astype(np.float64)), _unit(hog)])


# --------------------------------------------------------------------------
# projection and embeddings


@dataclass
class Projection:
    matrix: np.ndarray  # (BASE_DIM, EMBED_DIM)
    trained: bool = False

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.shape != (BASE_DIM, EMBED_DIM):
            raise DimensionMismatch(f"projection must be {BASE_DIM}x{EMBED_DIM}, got {self.matrix.shape}")
        if not np.all(np.isfinite(self.matrix)):
            raise DivergedLoss("projection has non-finite entries")

    @classmethod
    def identity(cls) -> "Projection":
        return cls(np.eye(BASE_DIM, EMBED_DIM))

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, matrix=self.matrix, trained=np.array(self.trained))

    @classmethod
    def load(cls, path) -> "Projection":
        with np.load(path) as data:
            return cls(data["matrix"], bool(data["trained"]))


@dataclass(frozen=True)
class GlobalEmbedding:
    image_id: str
    vector: np.ndarray


def project(base: np.ndarray, projection: Projection) -> np.ndarray:
    """Row-wise projection + L2 normalisation of base features."""
    z = np.atleast_2d(base) @ projection.matrix
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ZeroVector("projection output is the zero vector")
    return z / norms


def embed(img: ImageBuf, projection: Projection, image_id: str = "") -> GlobalEmbedding:
    return GlobalEmbedding(image_id, project(baseline_embed(img), projection)[0])


@dataclass
class EmbeddingStore:
    ids: list[str]
    matrix: np.ndarray  # (n, 256) float32, unit rows

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float32).reshape(-1, EMBED_DIM)
        if len(self.ids) != len(self.matrix):
            raise DimensionMismatch("ids and rows differ in length")
        self._rank = np.argsort(np.argsort(np.array(self.ids, dtype=object), kind="stable"), kind="stable")

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_embeddings(cls, embeddings: Sequence[GlobalEmbedding]) -> "EmbeddingStore":
        return cls([e.image_id for e in embeddings], np.array([e.vector for e in embeddings]).reshape(-1, EMBED_DIM))


def topk_global(store: EmbeddingStore, q: GlobalEmbedding | np.ndarray, k: int = 10,
                threshold: float = 0.0) -> list[tuple[str, float]]:
    """Top-k references by cosine similarity, keeping those >= ``threshold``."""
    if len(store) == 0:
        raise EmptyStore("embedding store is empty")
    vec = q.vector if isinstance(q, GlobalEmbedding) else np.asarray(q)
    vec = _unit(np.asarray(vec, dtype=np.float64))
    sims = store.matrix.astype(np.float64) @ vec
    order = np.lexsort((store._rank, -sims))[:k]
    return [(store.ids[i], float(sims[i])) for i in order if sims[i] >= threshold]


def save_embeddings(store: EmbeddingStore, path) -> None:
    parts = [_GEM_MAGIC, struct.pack("<IQH", _GEM_VERSION, len(store), EMBED_DIM)]
    for ident in store.ids:
        raw = ident.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
    parts.append(np.ascontiguousarray(store.matrix, dtype="<f4").tobytes())
    try:
        Path(path).write_bytes(b"".join(parts))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def load_embeddings(path) -> EmbeddingStore:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if data[:4] != _GEM_MAGIC:
        raise BadMagic("not a GEM1 embedding file")
    try:
        version, count, dim = struct.unpack_from("<IQH", data, 4)
        if version != _GEM_VERSION:
            raise VersionMismatch(f"embedding file version {version}")
        if dim != EMBED_DIM:
            raise DimensionMismatch(f"embedding dim {dim}, expected {EMBED_DIM}")
        pos = 4 + struct.calcsize("<IQH")
        ids = []
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            ids.append(data[pos + 4:pos + 4 + n].decode("utf-8"))
            pos += 4 + n
        matrix = np.frombuffer(data, dtype="<f4", count=count * dim, offset=pos).reshape(count, dim)
    except CopyDetError:
        raise
    except (struct.error, ValueError) as exc:
        raise CorruptStream(str(exc)) from exc
    matrix = matrix.astype(np.float32)
    norms = np.linalg.norm(matrix.astype(np.float64), axis=1)
    off = np.abs(norms - 1.0) > 1e-3
    if off.any():
        warnings.warn(f"{int(off.sum())} embedding rows were not unit-norm; re-normalised", stacklevel=2)
        matrix[off] = (matrix[off] / norms[off, None]).astype(np.float32)
    return EmbeddingStore(ids, matrix)


# --------------------------------------------------------------------------
# triplet loss and mining


def triplet_loss(ap: float, an: float, margin: float = 0.3) -> tuple[float, tuple[float, float]]:
    """Hinge ``max(0, ap - an + margin)`` and its gradient w.r.t. (ap, an).

    At the hinge boundary the active branch's gradient is returned.
    """
    if margin <= 0:
        raise ParamOutOfRange(f"margin must be > 0, got {margin}")
    if ap < 0 or an < 0:
        raise NegativeDistance(f"distances must be >= 0, got ap={ap}, an={an}")
    value = (ap + margin) - an  # this order keeps decimal boundary cases exact
    if value >= 0:
        return max(value, 0.0), (1.0, -1.0)
    return 0.0, (0.0, 0.0)


@dataclass
class TripletBatch:
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray  # indices >= batch size refer to memory rows
    ap: np.ndarray
    an: np.ndarray

    def __len__(self) -> int:
        return len(self.anchors)

    def as_set(self) -> set[tuple[int, int, int]]:
        return set(zip(self.anchors.tolist(), self.positives.tolist(), self.negatives.tolist()))


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", a, a)[:, None] + np.einsum("ij,ij->i", b, b)[None, :] - 2.0 * (a @ b.T)
    return np.sqrt(np.maximum(sq, 0.0))


def mine_triplets(features: np.ndarray, ids: Sequence, margin: float = 0.3,
                  memory: "XbmQueue | None" = None) -> TripletBatch:
    """All hardest-negative and semi-hard triplets for every anchor-positive pair.

    Negatives come from the batch and, if given, from ``memory``; memory rows
    are numbered after the batch rows.
    """
    x = np.asarray(features, dtype=np.float64)
    ids = np.asarray(ids)
    neg_x, neg_ids = x, ids
    if memory is not None and len(memory):
        neg_x = np.concatenate([x, memory.features])
        neg_ids = np.concatenate([ids, memory.ids.astype(ids.dtype)])
    same = ids[:, None] == ids[None, :]
    np.fill_diagonal(same, False)
    a_idx, p_idx = np.nonzero(same)
    is_neg = ids[:, None] != neg_ids[None, :]
    if len(a_idx) == 0 or not is_neg.any():
        raise NoValidTriplets("batch needs >= 2 ids and an id with >= 2 samples")
    d_pos = pairwise_distances(x, x)
    d_neg = pairwise_distances(x, neg_x)
    far = np.where(is_neg, d_neg, np.inf)
    hardest = np.argmin(far, axis=1)

    ap = d_pos[a_idx, p_idx]
    dn = d_neg[a_idx]
    chosen = is_neg[a_idx] & (dn > ap[:, None]) & (dn < ap[:, None] + margin)
    has_neg = is_neg[a_idx].any(axis=1)
    chosen[np.nonzero(has_neg)[0], hardest[a_idx[has_neg]]] = True
    pair, n_idx = np.nonzero(chosen)
    if len(pair) == 0:
        raise NoValidTriplets("no anchor has a negative")
    a, p = a_idx[pair], p_idx[pair]
    return TripletBatch(a, p, n_idx, d_pos[a, p], d_neg[a, n_idx])


# --------------------------------------------------------------------------
# cross-batch memory


class XbmQueue:
    """FIFO bank of past embeddings and their source ids."""

    def __init__(self, capacity: int, dim: int = EMBED_DIM):
        self.capacity = int(capacity)
        self.features = np.zeros((0, dim))
        self.ids = np.zeros(0, dtype=object)

    def __len__(self) -> int:
        return len(self.features)

    def push(self, features: np.ndarray, ids: Sequence) -> "XbmQueue":
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if len(features) > self.capacity:
            raise CapacityTooSmall(f"batch of {len(features)} exceeds capacity {self.capacity}")
        self.features = np.concatenate([self.features.reshape(-1, features.shape[1]), features])[-self.capacity:]
        self.ids = np.concatenate([self.ids, np.asarray(list(ids), dtype=object)])[-self.capacity:]
        return self

    def negatives(self, anchor_id) -> np.ndarray:
        return self.features[self.ids != anchor_id]


# --------------------------------------------------------------------------
# training


def triplet_objective(matrix: np.ndarray, base: np.ndarray, triplets: TripletBatch, margin: float,
                      memory_features: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Mean hinge over a fixed triplet set and its gradient w.r.t. the projection matrix.

    Memory rows are constants: no gradient flows into them.
    """
    z = base @ matrix
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    e = z / norms
    n_batch = len(e)
    neg_pool = e if memory_features is None or len(memory_features) == 0 else np.concatenate([e, memory_features])
    a, p, n = triplets.anchors, triplets.positives, triplets.negatives
    ap = pairwise_distances(e, e)[a, p]
    an = pairwise_distances(e, neg_pool)[a, n]
    hinge = (ap + margin) - an
    active = hinge >= 0
    loss = float(np.mean(np.maximum(hinge, 0.0)))

    # fold per-triplet unit vectors into pair weights: d|x-y|/dx = (x-y)/|x-y|
    t = len(a)
    w_ap = np.divide(active / t, ap, out=np.zeros(t), where=ap > 0)
    w_an = np.divide(active / t, an, out=np.zeros(t), where=an > 0)
    c_pos = np.zeros((n_batch, n_batch))
    c_neg = np.zeros((n_batch, len(neg_pool)))
    np.add.at(c_pos, (a, p), w_ap)
    np.add.at(c_neg, (a, n), w_an)
    grad_e = (c_pos.sum(axis=1) - c_neg.sum(axis=1))[:, None] * e - c_pos @ e + c_neg @ neg_pool
    grad_e += c_pos.sum(axis=0)[:, None] * e - c_pos.T @ e
    c_in = c_neg[:, :n_batch]
    grad_e += c_in.T @ e - c_in.sum(axis=0)[:, None] * e
    # through the normalisation e = z / |z|
    grad_z = (grad_e - e * np.sum(grad_e * e, axis=1, keepdims=True)) / norms
    return loss, base.T @ grad_z


def dataset_loss(matrix: np.ndarray, base: np.ndarray, ids: Sequence, margin: float) -> float:
    e = project(base, Projection(matrix))
    trip = mine_triplets(e, ids, margin)
    loss = float(np.mean(np.maximum((trip.ap + margin) - trip.an, 0.0)))
    return loss


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 1.0
    margin: float = 0.3
    batch_size: int = 32
    xbm_capacity: int = 1024
    seed: int = 0


@dataclass
class TrainResult:
    projection: Projection  # the lowest-loss epoch, so never worse than the initial projection
    loss_trace: list[float] = field(default_factory=list)  # index 0 = before training
    best_epoch: int = 0


def _id_batches(ids: np.ndarray, batch_size: int, rng) -> list[np.ndarray]:
    """Shuffle ids and pack all samples of each id into batches of about ``batch_size``."""
    uniq = np.unique(ids)
    rng.shuffle(uniq)
    groups = [np.nonzero(ids == u)[0] for u in uniq]
    batches, cur = [], []
    for g in groups:
        cur.extend(g.tolist())
        if len(cur) >= batch_size:
            batches.append(np.array(cur))
            cur = []
    if cur:
        batches.append(np.array(cur))
    return batches


def train_projection(base: np.ndarray, ids: Sequence, config: TrainConfig = TrainConfig(),
                     init: Projection | None = None) -> TrainResult:
    """Plain gradient descent on the mean triplet loss (in-batch + XBM negatives)."""
    base = np.asarray(base, dtype=np.float64)
    ids = np.asarray(ids, dtype=object)
    if len(np.unique(ids)) < 2:
        raise NoValidTriplets("training needs at least two source ids")
    matrix = (init or Projection.identity()).matrix.copy()
    rng = np.random.default_rng(config.seed)
    memory = XbmQueue(config.xbm_capacity)
    trace = [dataset_loss(matrix, base, ids, config.margin)]
    best_epoch, best_matrix = 0, matrix.copy()
    log.info("epoch 0 loss %.6f", trace[0])
    for epoch in range(1, config.epochs + 1):
        for batch in _id_batches(ids, config.batch_size, rng):
            xb, ib = base[batch], ids[batch]
            e = project(xb, Projection(matrix))
            try:
                trip = mine_triplets(e, ib, config.margin, memory)
            except NoValidTriplets:
                continue
            _, grad = triplet_objective(matrix, xb, trip, config.margin, memory.features)
            matrix -= config.lr * grad
            if not np.all(np.isfinite(matrix)):
                raise DivergedLoss(f"non-finite projection at epoch {epoch}")
            memory.push(project(xb, Projection(matrix)), ib)
        loss = dataset_loss(matrix, base, ids, config.margin)
        if not np.isfinite(loss):
            raise DivergedLoss(f"loss became {loss} at epoch {epoch}")
        trace.append(loss)
        if loss < trace[best_epoch]:
            best_epoch, best_matrix = epoch, matrix.copy()
        log.info("epoch %d loss %.6f", epoch, loss)
    return TrainResult(Projection(best_matrix, trained=True), trace, best_epoch)
