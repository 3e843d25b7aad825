"""SIFT keypoints and 128-byte descriptors (Lowe 2004), numpy + numba.

The pyramid is built with separable Gaussian filtering; extremum refinement,
orientation histograms and descriptor binning run in numba kernels that release
the GIL, so extraction parallelises across a thread pool.

No initial 2x upsampling is done: the first octave is the input resolution.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterator

import numpy as np
from numba import njit
from scipy import ndimage

from .errors import BadMagic, CorruptStream, DegenerateImage, ParamOutOfRange
from .imaging import GrayImage

DESCRIPTOR_DIM = 128
ORI_BINS = 36
ORI_PEAK_RATIO = 0.8
ORI_SIGMA_FACTOR = 1.5
DESC_WIDTH = 4
DESC_ORI_BINS = 8
DESC_SCALE_FACTOR = 3.0
MAX_REFINE_STEPS = 5
IMAGE_BORDER = 5
ASSUMED_BLUR = 0.5


@dataclass(frozen=True)
class SiftParams:
    scales_per_octave: int = 3
    base_sigma: float = 1.6
    contrast_threshold: float = 0.03
    edge_ratio: float = 10.0
    max_keypoints: int = 600
    descriptor_clip: float = 0.2

    def __post_init__(self):
        if self.scales_per_octave < 2:
            raise ParamOutOfRange("scales_per_octave must be >= 2")
        if min(self.base_sigma, self.contrast_threshold, self.edge_ratio, self.descriptor_clip) <= 0:
            raise ParamOutOfRange("SIFT thresholds must be positive")
        if self.max_keypoints < 1:
            raise ParamOutOfRange("max_keypoints must be >= 1")

    @property
    def dog_threshold(self) -> float:
        """Threshold on |DoG| at the refined extremum (contrast_threshold / s)."""
        return self.contrast_threshold / self.scales_per_octave


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    scale: float
    orientation: float
    response: float


@dataclass
class ScaleSpace:
    gaussians: list  # per octave: (s + 3, h, w) float32
    dogs: list  # per octave: (s + 2, h, w) float32
    params: SiftParams

    @property
    def n_octaves(self) -> int:
        return len(self.gaussians)


@dataclass
class DetectedKeypoints:
    """Keypoints plus the pyramid coordinates needed to describe them.

    ``rows`` holds ``[x, y, scale, orientation, response]`` in input-image
    pixels; ``octave`` / ``layer`` index the Gaussian level they came from.
    """

    rows: np.ndarray  # (n, 5) float64
    octave: np.ndarray  # (n,) int64
    layer: np.ndarray  # (n,) int64

    def __len__(self) -> int:
        return len(self.rows)

    def take(self, idx) -> "DetectedKeypoints":
        return DetectedKeypoints(self.rows[idx], self.octave[idx], self.layer[idx])

    def to_keypoints(self) -> list[Keypoint]:
        return [Keypoint(*map(float, r)) for r in self.rows]


@dataclass
class FeatureSet:
    image_id: str
    keypoints: np.ndarray = field(default_factory=lambda: np.zeros((0, 5), np.float32))
    descriptors: np.ndarray = field(default_factory=lambda: np.zeros((0, DESCRIPTOR_DIM), np.uint8))

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float32).reshape(-1, 5)
        self.descriptors = np.asarray(self.descriptors, dtype=np.uint8).reshape(-1, DESCRIPTOR_DIM)
        if len(self.keypoints) != len(self.descriptors):
            raise ValueError("keypoints and descriptors must have equal length")

    def __len__(self) -> int:
        return len(self.descriptors)

    def keypoint(self, i: int) -> Keypoint:
        return Keypoint(*map(float, self.keypoints[i]))

    def __eq__(self, other):
        if not isinstance(other, FeatureSet):
            return NotImplemented
        return (self.image_id == other.image_id
                and np.array_equal(self.keypoints, other.keypoints)
                and np.array_equal(self.descriptors, other.descriptors))


# --------------------------------------------------------------------------
# scale space


def n_octaves_for(min_edge: int) -> int:
    return int(math.floor(math.log2(min_edge))) - 2


def _blur(img: np.ndarray, sigma: float) -> np.ndarray:
    return ndimage.gaussian_filter(img, sigma, mode="nearest", truncate=4.0, output=np.float32)


def build_scale_space(img: GrayImage, p: SiftParams = SiftParams()) -> ScaleSpace:
    min_edge = min(img.width, img.height)
    if min_edge < 16:
        raise DegenerateImage(f"SIFT needs min edge >= 16, got {min_edge}")
    s = p.scales_per_octave
    sigmas = [p.base_sigma * 2.0 ** (k / s) for k in range(s + 3)]
    increments = [math.sqrt(sigmas[k] ** 2 - sigmas[k - 1] ** 2) for k in range(1, s + 3)]

    base = _blur(img.pixels, math.sqrt(max(p.base_sigma ** 2 - ASSUMED_BLUR ** 2, 0.01)))
    gaussians, dogs = [], []
    for _ in range(n_octaves_for(min_edge)):
        levels = [base]
        for inc in increments:
            levels.append(_blur(levels[-1], inc))
        stack = np.stack(levels)
        gaussians.append(stack)
        dogs.append(stack[1:] - stack[:-1])
        # level s carries twice the base blur; decimating restores base_sigma
        base = np.ascontiguousarray(stack[s][::2, ::2])
    return ScaleSpace(gaussians, dogs, p)


# --------------------------------------------------------------------------
# extrema detection


@njit(cache=True, nogil=True)
def _is_extremum(dog, l, r, c):
    v = dog[l, r, c]
    if v > 0:
        for dl in range(-1, 2):
            for dr in range(-1, 2):
                for dc in range(-1, 2):
                    if dog[l + dl, r + dr, c + dc] > v:
                        return False
    else:
        for dl in range(-1, 2):
            for dr in range(-1, 2):
                for dc in range(-1, 2):
                    if dog[l + dl, r + dr, c + dc] < v:
                        return False
    return True


@njit(cache=True, nogil=True)
def _derivatives(dog, l, r, c):
    v2 = 2.0 * dog[l, r, c]
    dx = 0.5 * (dog[l, r, c + 1] - dog[l, r, c - 1])
    dy = 0.5 * (dog[l, r + 1, c] - dog[l, r - 1, c])
    ds = 0.5 * (dog[l + 1, r, c] - dog[l - 1, r, c])
    dxx = dog[l, r, c + 1] + dog[l, r, c - 1] - v2
    dyy = dog[l, r + 1, c] + dog[l, r - 1, c] - v2
    dss = dog[l + 1, r, c] + dog[l - 1, r, c] - v2
    dxy = 0.25 * (dog[l, r + 1, c + 1] - dog[l, r + 1, c - 1] - dog[l, r - 1, c + 1] + dog[l, r - 1, c - 1])
    dxs = 0.25 * (dog[l + 1, r, c + 1] - dog[l + 1, r, c - 1] - dog[l - 1, r, c + 1] + dog[l - 1, r, c - 1])
    dys = 0.25 * (dog[l + 1, r + 1, c] - dog[l + 1, r - 1, c] - dog[l - 1, r + 1, c] + dog[l - 1, r - 1, c])
    g = np.array([dx, dy, ds])
    h = np.array([[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]])
    return g, h


@njit(cache=True, nogil=True)
def _detect_octave(dog, prelim, threshold, edge_ratio, border):
    n_layers, height, width = dog.shape
    out = []
    for l0 in range(1, n_layers - 1):
        for r0 in range(border, height - border):
            for c0 in range(border, width - border):
                if abs(dog[l0, r0, c0]) <= prelim or not _is_extremum(dog, l0, r0, c0):
                    continue
                l, r, c = l0, r0, c0
                converged = False
                offset = np.zeros(3)
                g = np.zeros(3)
                for _ in range(MAX_REFINE_STEPS):
                    g, h = _derivatives(dog, l, r, c)
                    if abs(np.linalg.det(h)) < 1e-12:
                        break
                    offset = -np.linalg.solve(h, g)
                    if abs(offset[0]) < 0.5 and abs(offset[1]) < 0.5 and abs(offset[2]) < 0.5:
                        converged = True
                        break
                    c += int(round(offset[0]))
                    r += int(round(offset[1]))
                    l += int(round(offset[2]))
                    if l < 1 or l > n_layers - 2 or r < border or r >= height - border \
                            or c < border or c >= width - border:
                        break
                if not converged:
                    continue
                contrast = dog[l, r, c] + 0.5 * (g[0] * offset[0] + g[1] * offset[1] + g[2] * offset[2])
                if abs(contrast) < threshold:
                    continue
                dxx = dog[l, r, c + 1] + dog[l, r, c - 1] - 2.0 * dog[l, r, c]
                dyy = dog[l, r + 1, c] + dog[l, r - 1, c] - 2.0 * dog[l, r, c]
                dxy = 0.25 * (dog[l, r + 1, c + 1] - dog[l, r + 1, c - 1]
                              - dog[l, r - 1, c + 1] + dog[l, r - 1, c - 1])
                tr = dxx + dyy
                det = dxx * dyy - dxy * dxy
                if det <= 0 or tr * tr * edge_ratio >= (edge_ratio + 1.0) ** 2 * det:
                    continue
                out.append((c + offset[0], r + offset[1], l + offset[2], abs(contrast), float(l)))
    return out


def _sort_order(rows: np.ndarray) -> np.ndarray:
    """Descending response, ties by (y, x, scale, orientation) ascending."""
    return np.lexsort((rows[:, 3], rows[:, 2], rows[:, 0], rows[:, 1], -rows[:, 4]))


def detect_keypoints(space: ScaleSpace, p: SiftParams | None = None) -> DetectedKeypoints:
    """Refined, contrast- and edge-filtered DoG extrema, capped at ``max_keypoints``.

    The orientation column is left at zero.
    """
    p = p or space.params
    s = p.scales_per_octave
    prelim = 0.5 * p.dog_threshold
    rows, octaves, layers = [], [], []
    for o, dog in enumerate(space.dogs):
        found = _detect_octave(dog, prelim, p.dog_threshold, p.edge_ratio, IMAGE_BORDER)
        for xo, yo, lo, response, layer in found:
            step = 2.0 ** o
            rows.append((xo * step, yo * step, p.base_sigma * 2.0 ** (o + lo / s), 0.0, response))
            octaves.append(o)
            layers.append(int(layer))
    if not rows:
        return DetectedKeypoints(np.zeros((0, 5)), np.zeros(0, np.int64), np.zeros(0, np.int64))
    kps = DetectedKeypoints(np.array(rows, dtype=np.float64), np.array(octaves), np.array(layers))
    return kps.take(_sort_order(kps.rows)[:p.max_keypoints])


# --------------------------------------------------------------------------
# orientation


@njit(cache=True, nogil=True)
def _orientation_histogram(img, x, y, sigma):
    height, width = img.shape
    hist = np.zeros(ORI_BINS)
    sig_w = ORI_SIGMA_FACTOR * sigma
    radius = int(round(3.0 * sig_w))
    factor = -0.5 / (sig_w * sig_w)
    ix = int(round(x))
    iy = int(round(y))
    for dy in range(-radius, radius + 1):
        yy = iy + dy
        if yy <= 0 or yy >= height - 1:
            continue
        for dx in range(-radius, radius + 1):
            xx = ix + dx
            if xx <= 0 or xx >= width - 1:
                continue
            gx = img[yy, xx + 1] - img[yy, xx - 1]
            gy = img[yy + 1, xx] - img[yy - 1, xx]
            mag = math.sqrt(gx * gx + gy * gy)
            if mag == 0.0:
                continue
            ang = math.atan2(gy, gx)
            if ang < 0:
                ang += 2.0 * math.pi
            b = int(round(ang * ORI_BINS / (2.0 * math.pi))) % ORI_BINS
            hist[b] += math.exp(factor * (dx * dx + dy * dy)) * mag
    smooth = np.zeros(ORI_BINS)
    for i in range(ORI_BINS):
        smooth[i] = (6.0 * hist[i]
                     + 4.0 * (hist[(i - 1) % ORI_BINS] + hist[(i + 1) % ORI_BINS])
                     + hist[(i - 2) % ORI_BINS] + hist[(i + 2) % ORI_BINS]) / 16.0
    return smooth


def orientation_peaks(hist: np.ndarray) -> list[float]:
    """Angles (radians, [0, 2pi)) of all local peaks >= 80% of the histogram max."""
    n = len(hist)
    top = hist.max()
    if top <= 0:
        return []
    angles = []
    for i in range(n):
        left, mid, right = hist[(i - 1) % n], hist[i], hist[(i + 1) % n]
        if mid > left and mid >= right and mid >= ORI_PEAK_RATIO * top:
            denom = left - 2.0 * mid + right
            offset = 0.5 * (left - right) / denom if denom != 0 else 0.0
            b = (i + offset) % n
            angles.append((b * 2.0 * math.pi / n) % (2.0 * math.pi))
    return angles


def assign_orientations(kps: DetectedKeypoints, space: ScaleSpace) -> DetectedKeypoints:
    """Give each keypoint its dominant orientation(s); secondary peaks add copies."""
    rows, octaves, layers = [], [], []
    for row, o, l in zip(kps.rows, kps.octave, kps.layer):
        step = 2.0 ** o
        hist = _orientation_histogram(space.gaussians[o][l], row[0] / step, row[1] / step, row[2] / step)
        for angle in orientation_peaks(hist):
            rows.append((row[0], row[1], row[2], angle, row[4]))
            octaves.append(o)
            layers.append(l)
    if not rows:
        return DetectedKeypoints(np.zeros((0, 5)), np.zeros(0, np.int64), np.zeros(0, np.int64))
    return DetectedKeypoints(np.array(rows), np.array(octaves), np.array(layers))


# --------------------------------------------------------------------------
# descriptors


@njit(cache=True, nogil=True)
def _raw_descriptor(img, x, y, sigma, angle):
    height, width = img.shape
    d = DESC_WIDTH
    n = DESC_ORI_BINS
    hist = np.zeros((d + 2, d + 2, n + 2))
    hist_width = DESC_SCALE_FACTOR * sigma
    radius = int(round(hist_width * math.sqrt(2.0) * (d + 1) * 0.5))
    radius = min(radius, int(math.sqrt(height * height + width * width)))
    cos_t = math.cos(angle) / hist_width
    sin_t = math.sin(angle) / hist_width
    exp_scale = -1.0 / (d * d * 0.5)
    bins_per_rad = n / (2.0 * math.pi)
    ix = int(round(x))
    iy = int(round(y))
    for i in range(-radius, radius + 1):
        yy = iy + i
        if yy <= 0 or yy >= height - 1:
            continue
        for j in range(-radius, radius + 1):
            xx = ix + j
            if xx <= 0 or xx >= width - 1:
                continue
            c_rot = j * cos_t + i * sin_t
            r_rot = -j * sin_t + i * cos_t
            rbin = r_rot + d / 2.0 - 0.5
            cbin = c_rot + d / 2.0 - 0.5
            if rbin <= -1.0 or rbin >= d or cbin <= -1.0 or cbin >= d:
                continue
            gx = img[yy, xx + 1] - img[yy, xx - 1]
            gy = img[yy + 1, xx] - img[yy - 1, xx]
            mag = math.sqrt(gx * gx + gy * gy)
            if mag == 0.0:
                continue
            rel = math.atan2(gy, gx) - angle
            rel = rel % (2.0 * math.pi)
            obin = rel * bins_per_rad
            w = mag * math.exp((c_rot * c_rot + r_rot * r_rot) * exp_scale)
            r0 = int(math.floor(rbin))
            c0 = int(math.floor(cbin))
            o0 = int(math.floor(obin))
            fr = rbin - r0
            fc = cbin - c0
            fo = obin - o0
            o0 = o0 % n
            for a in range(2):
                wr = w * (fr if a else 1.0 - fr)
                for b in range(2):
                    wc = wr * (fc if b else 1.0 - fc)
                    hist[r0 + 1 + a, c0 + 1 + b, o0] += wc * (1.0 - fo)
                    hist[r0 + 1 + a, c0 + 1 + b, o0 + 1] += wc * fo
    out = np.zeros(d * d * n)
    k = 0
    for r in range(1, d + 1):
        for c in range(1, d + 1):
            hist[r, c, 0] += hist[r, c, n]
            for o in range(n):
                out[k] = hist[r, c, o]
                k += 1
    return out


def normalize_descriptors(raw: np.ndarray, clip: float) -> np.ndarray:
    """L2-normalise, clip, re-normalise.  Zero rows stay zero."""
    raw = np.asarray(raw, dtype=np.float64)
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    unit = np.divide(raw, norms, out=np.zeros_like(raw), where=norms > 0)
    unit = np.minimum(unit, clip)
    norms = np.linalg.norm(unit, axis=1, keepdims=True)
    return np.divide(unit, norms, out=np.zeros_like(unit), where=norms > 0)


def quantize_descriptors(unit: np.ndarray) -> np.ndarray:
    return np.clip(np.round(unit * 512.0), 0, 255).astype(np.uint8)


def raw_descriptors(kps: DetectedKeypoints, space: ScaleSpace) -> np.ndarray:
    out = np.zeros((len(kps), DESCRIPTOR_DIM))
    for i, (row, o, l) in enumerate(zip(kps.rows, kps.octave, kps.layer)):
        step = 2.0 ** o
        out[i] = _raw_descriptor(space.gaussians[o][l], row[0] / step, row[1] / step, row[2] / step, row[3])
    return out


def compute_descriptors(kps: DetectedKeypoints, space: ScaleSpace, p: SiftParams | None = None) -> np.ndarray:
    p = p or space.params
    return quantize_descriptors(normalize_descriptors(raw_descriptors(kps, space), p.descriptor_clip))


def extract(img: GrayImage, p: SiftParams = SiftParams(), image_id: str = "") -> FeatureSet:
    """Full SIFT pipeline on an already-resized grayscale image."""
    space = build_scale_space(img, p)
    kps = assign_orientations(detect_keypoints(space, p), space)
    if len(kps) == 0:
        return FeatureSet(image_id)
    kps = kps.take(_sort_order(kps.rows)[:p.max_keypoints])
    return FeatureSet(image_id, kps.rows.astype(np.float32), compute_descriptors(kps, space, p))


# --------------------------------------------------------------------------
# SFT1 feature files

_SFT_MAGIC = b"SFT1"
_KP_DTYPE = np.dtype([("kp", "<f4", (5,)), ("desc", "u1", (DESCRIPTOR_DIM,))])


def write_feature_set(fh: BinaryIO, fs: FeatureSet) -> None:
    ident = fs.image_id.encode("utf-8")
    fh.write(_SFT_MAGIC + struct.pack("<I", len(ident)) + ident + struct.pack("<I", len(fs)))
    rec = np.empty(len(fs), dtype=_KP_DTYPE)
    rec["kp"] = fs.keypoints
    rec["desc"] = fs.descriptors
    fh.write(rec.tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CorruptStream("truncated feature file")
    return data


def read_feature_set(fh: BinaryIO) -> FeatureSet | None:
    """Read one record; ``None`` at a clean end of file."""
    magic = fh.read(4)
    if not magic:
        return None
    if magic != _SFT_MAGIC:
        raise BadMagic(f"expected {_SFT_MAGIC!r}, got {magic!r}")
    (n_id,) = struct.unpack("<I", _read_exact(fh, 4))
    image_id = _read_exact(fh, n_id).decode("utf-8")
    (count,) = struct.unpack("<I", _read_exact(fh, 4))
    rec = np.frombuffer(_read_exact(fh, count * _KP_DTYPE.itemsize), dtype=_KP_DTYPE)
    return FeatureSet(image_id, rec["kp"].copy(), rec["desc"].copy())


def save_feature_archive(path, feature_sets) -> None:
    buf = io.BytesIO()
    for fs in feature_sets:
        write_feature_set(buf, fs)
    Path(path).write_bytes(buf.getvalue())


def iter_feature_archive(path) -> Iterator[FeatureSet]:
    with open(path, "rb") as fh:
        while (fs := read_feature_set(fh)) is not None:
            yield fs


def load_feature_archive(path) -> list[FeatureSet]:
    return list(iter_feature_archive(path))
