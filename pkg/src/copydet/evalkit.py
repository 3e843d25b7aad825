"""Ground truth, micro-average precision and PR-curve / submission files."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .errors import DuplicatePair, EmptyGroundTruth, IoFailure, MalformedRow


class Prediction(NamedTuple):
    query_id: str
    reference_id: str
    score: float


@dataclass(frozen=True)
class GroundTruth:
    pairs: frozenset

    @property
    def positives(self) -> int:
        return len(self.pairs)

    def __contains__(self, pair) -> bool:
        return tuple(pair) in self.pairs


@dataclass
class PrCurve:
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))
    precision: np.ndarray = field(default_factory=lambda: np.zeros(0))
    recall: np.ndarray = field(default_factory=lambda: np.zeros(0))
    micro_ap: float = 0.0

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.recall.tolist(), self.precision.tolist()))


def _read_rows(path, header: list[str]):
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    with fh:
        reader = csv.reader(fh)
        got = next(reader, None)
        if got is None or [h.strip() for h in got] != header:
            raise MalformedRow(f"{path}: expected header {header}, got {got}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec or rec[0].startswith("#"):
                continue
            if len(rec) != len(header):
                raise MalformedRow(f"{path}:{lineno}: expected {len(header)} fields")
            yield lineno, [r.strip() for r in rec]


def load_ground_truth(path) -> GroundTruth:
    pairs = {(q, r) for _, (q, r) in _read_rows(path, ["query_id", "reference_id"])}
    if not pairs:
        raise EmptyGroundTruth(f"{path} has no rows")
    return GroundTruth(frozenset(pairs))


def ground_truth_from_pairs(pairs: Iterable[tuple[str, str]]) -> GroundTruth:
    gt = GroundTruth(frozenset((str(q), str(r)) for q, r in pairs))
    if not gt.pairs:
        raise EmptyGroundTruth("no ground-truth pairs")
    return gt


def _as_predictions(submission) -> list[Prediction]:
    out = []
    for item in submission:
        if isinstance(item, Prediction):
            out.append(item)
        elif hasattr(item, "fused"):
            out.append(Prediction(item.query_id, item.reference_id, item.fused))
        else:
            q, r, s = item
            out.append(Prediction(q, r, s))
    return out


def rank_submission(submission) -> list[Prediction]:
    """Score descending; ties by (query id, reference id) ascending."""
    preds = _as_predictions(submission)
    seen = set()
    for p in preds:
        key = (p.query_id, p.reference_id)
        if key in seen:
            raise DuplicatePair(f"pair {key} submitted twice")
        seen.add(key)
    return sorted(preds, key=lambda p: (-p.score, p.query_id, p.reference_id))


def micro_ap(submission, gt: GroundTruth) -> PrCurve:
    """Area under the step PR curve over the ranked submission, normalised by |gt|."""
    ranked = rank_submission(submission)
    if not ranked:
        return PrCurve()
    hits = np.array([(p.query_id, p.reference_id) in gt.pairs for p in ranked], dtype=np.float64)
    tp = np.cumsum(hits)
    ranks = np.arange(1, len(hits) + 1)
    precision = tp / ranks
    recall = tp / gt.positives
    ap = float(np.sum(precision * hits) / gt.positives)
    return PrCurve(np.array([p.score for p in ranked], dtype=np.float64), precision, recall, ap)


def write_pr_csv(curve: PrCurve, path) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["rank", "score", "precision", "recall"])
            for i, (s, p, r) in enumerate(zip(curve.scores, curve.precision, curve.recall), start=1):
                writer.writerow([i, repr(float(s)), repr(float(p)), repr(float(r))])
            fh.write(f"# micro_ap={curve.micro_ap!r}\n")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def write_submission(pairs, path) -> None:
    """CSV ``query_id,reference_id,score`` in ranked order, integer scores."""
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["query_id", "reference_id", "score"])
            for p in rank_submission(pairs):
                writer.writerow([p.query_id, p.reference_id, int(p.score)])
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def load_submission(path) -> list[Prediction]:
    out = []
    for lineno, (q, r, s) in _read_rows(path, ["query_id", "reference_id", "score"]):
        try:
            out.append(Prediction(q, r, float(s)))
        except ValueError as exc:
            raise MalformedRow(f"{path}:{lineno}: bad score {s!r}") from exc
    return out


def write_ground_truth(pairs: Iterable[tuple[str, str]], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["query_id", "reference_id"])
        for q, r in pairs:
            writer.writerow([q, r])
