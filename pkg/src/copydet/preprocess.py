"""Overlay (pasted foreground) detection and routing of image variants to branches.

The detector is a deterministic heuristic: Sobel gradients are projected onto
rows and columns, the strongest step-edge positions per axis are paired into
candidate rectangles, and each rectangle is scored by how much of its weakest
side carries a step edge that stands out from the clutter just outside it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy import ndimage

from .errors import BoxOutOfBounds, DegenerateImage, MalformedRow, NegativeDimension
from .imaging import CropBox, GrayImage, ImageBuf, crop

__all__ = [
    "BranchInputs", "CropBox", "DetectorConfig", "detect_pasted_region", "load_crop_boxes", "route_variants",
]

FULL_FRAME_FRACTION = 0.95


@dataclass(frozen=True)
class DetectorConfig:
    min_frac: float = 0.05
    max_frac: float = 0.90
    # per-pixel perpendicular gradient (Sobel / 8, [0, 1] intensities) that counts as edge
    edge_threshold: float = 0.03
    # edge pixels must also beat the clutter just outside the side by this factor
    clutter_ratio: float = 2.0
    # calibrated on synthetic pastes vs paste-free images (tests/test_preprocess.py)
    min_side_coverage: float = 0.45
    peaks_per_axis: int = 8
    work_edge: int = 256


@dataclass(frozen=True)
class BranchInputs:
    global_input: ImageBuf
    local_inputs: tuple  # (original,) or (original, crop)
    box: CropBox | None = None

    @property
    def detected(self) -> bool:
        return self.box is not None


def _sobel(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx = ndimage.sobel(gray, axis=1, mode="nearest") / 8.0
    gy = ndimage.sobel(gray, axis=0, mode="nearest") / 8.0
    return np.abs(gx), np.abs(gy)


def _profile_peaks(profile: np.ndarray, count: int, margin: int) -> list[int]:
    """Positions of the ``count`` largest local maxima, keeping ``margin`` from both ends."""
    n = len(profile)
    local_max = ndimage.maximum_filter1d(profile, size=5, mode="nearest") == profile
    idx = np.nonzero(local_max)[0]
    idx = idx[(idx >= margin) & (idx < n - margin)]
    chosen: list[int] = []
    for i in idx[np.argsort(-profile[idx], kind="stable")]:
        # plateaus of a step edge produce twin maxima; keep one
        if all(abs(int(i) - c) > 2 for c in chosen):
            chosen.append(int(i))
        if len(chosen) == count:
            break
    return sorted(chosen)


def _side_coverage(edge: np.ndarray, mag: np.ndarray, fixed: int, lo: int, hi: int, axis: int,
                   outward: int, cfg: DetectorConfig) -> float | None:
    """Fraction of one rectangle side carrying a clean step edge.

    The perpendicular gradient is read with +-1 px tolerance and compared with
    the mean gradient in a band 2..5 px outside the side.  ``None`` when that
    band would leave the image.
    """
    a, b = sorted((fixed + 2 * outward, fixed + 6 * outward))
    if a < 0 or b > mag.shape[axis]:
        return None
    if axis == 1:  # vertical side at column ``fixed``
        band = edge[lo:hi, max(fixed - 1, 0):fixed + 2].max(axis=1)
        clutter = mag[lo:hi, a:b].mean(axis=1)
    else:  # horizontal side at row ``fixed``
        band = edge[max(fixed - 1, 0):fixed + 2, lo:hi].max(axis=0)
        clutter = mag[a:b, lo:hi].mean(axis=0)
    return float(np.mean((band >= cfg.edge_threshold) & (band > cfg.clutter_ratio * clutter)))


def _box_score(gx, gy, mag, x0, x1, y0, y1, cfg: DetectorConfig) -> float | None:
    """Coverage of the weakest of the four sides."""
    sides = (
        _side_coverage(gx, mag, x0, y0, y1 + 1, 1, -1, cfg),
        _side_coverage(gx, mag, x1, y0, y1 + 1, 1, +1, cfg),
        _side_coverage(gy, mag, y0, x0, x1 + 1, 0, -1, cfg),
        _side_coverage(gy, mag, y1, x0, x1 + 1, 0, +1, cfg),
    )
    if any(s is None for s in sides):
        return None
    return min(sides)


def detect_pasted_region(img: GrayImage, cfg: DetectorConfig = DetectorConfig()) -> CropBox | None:
    """Most salient inner rectangle that looks pasted, or ``None``."""
    h, w = img.height, img.width
    if min(h, w) < 32:
        raise DegenerateImage("detector needs min edge >= 32")
    scale = min(1.0, cfg.work_edge / max(h, w))
    gray = img.pixels.astype(np.float64)
    if scale < 1.0:
        gray = ndimage.zoom(gray, scale, order=1, grid_mode=True, mode="nearest")
    sh, sw = gray.shape
    gx, gy = _sobel(gray)
    mag = gx + gy
    if not (gx.any() or gy.any()):
        return None

    # step edges sit one pixel either side of the boundary; the ±1 band absorbs that
    xs = _profile_peaks(gx.sum(axis=0), cfg.peaks_per_axis, 2)
    ys = _profile_peaks(gy.sum(axis=1), cfg.peaks_per_axis, 2)
    best, best_key = None, None
    for x0, x1 in combinations(xs, 2):
        for y0, y1 in combinations(ys, 2):
            area = (x1 - x0) * (y1 - y0)
            if not cfg.min_frac <= area / float(sh * sw) <= cfg.max_frac:
                continue
            score = _box_score(gx, gy, mag, x0, x1, y0, y1, cfg)
            if score is None or score < cfg.min_side_coverage:
                continue
            key = (score, area)
            if best_key is None or key > best_key:
                best, best_key = (x0, x1, y0, y1), key
    if best is None:
        return None
    x0, x1, y0, y1 = best
    # map the edge pixels back to a half-open box in full-resolution pixels
    inv = 1.0 / scale
    bx0 = int(round((x0 + 0.5) * inv))
    by0 = int(round((y0 + 0.5) * inv))
    bx1 = min(w, int(round((x1 + 0.5) * inv)))
    by1 = min(h, int(round((y1 + 0.5) * inv)))
    if bx1 - bx0 < 1 or by1 - by0 < 1:
        return None
    box = CropBox(bx0, by0, bx1 - bx0, by1 - by0)
    if box.area >= FULL_FRAME_FRACTION * w * h:
        return None
    return box


def load_crop_boxes(path) -> dict[str, CropBox]:
    """Read ``image_id,x,y,w,h`` rows; later rows for an id override earlier ones."""
    boxes: dict[str, CropBox] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return boxes
        if [c.strip() for c in header] != ["image_id", "x", "y", "w", "h"]:
            raise MalformedRow(f"bad crop-box header {header}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 5:
                raise MalformedRow(f"line {lineno}: expected 5 fields")
            try:
                x, y, bw, bh = (int(v) for v in rec[1:])
            except ValueError as exc:
                raise MalformedRow(f"line {lineno}: {exc}") from exc
            if bw <= 0 or bh <= 0:
                raise NegativeDimension(f"line {lineno}: w and h must be positive")
            boxes[rec[0].strip()] = CropBox(x, y, bw, bh)
    return boxes


def route_variants(original: ImageBuf, detection: CropBox | None) -> BranchInputs:
    """Global branch gets the crop when there is one; local branches get original (+ crop)."""
    if detection is None:
        return BranchInputs(original, (original,))
    if not detection.fits(original.width, original.height):
        raise BoxOutOfBounds(f"{detection} outside {original.width}x{original.height}")
    if detection.area >= FULL_FRAME_FRACTION * original.width * original.height:
        return BranchInputs(original, (original,))
    piece = crop(original, detection)
    return BranchInputs(piece, (original, piece), detection)
