"""Image containers, geometric/photometric primitives and the attack generator.

Two raster types are used throughout the package:

* :class:`ImageBuf` -- 8-bit pixels, shape ``(height, width, channels)`` with
  ``channels`` in {1, 3}.  This is what decoding produces and what attacks act on.
* :class:`GrayImage` -- float32 intensities in [0, 1], shape ``(height, width)``.
  This is the SIFT / detector input.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Union

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import (
    BoxOutOfBounds,
    CorruptStream,
    DegenerateImage,
    MalformedRow,
    NegativeDimension,
    ParamOutOfRange,
    UnsupportedChannels,
    UnsupportedFormat,
)

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"
_JPEG_MAGIC = b"\xff\xd8"


@dataclass(frozen=True)
class ImageBuf:
    pixels: np.ndarray  # (h, w, c) uint8

    def __post_init__(self):
        px = self.pixels
        if px.ndim == 2:
            px = px[:, :, None]
            object.__setattr__(self, "pixels", px)
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise UnsupportedChannels(f"expected (h, w, 1|3) pixels, got shape {px.shape}")
        if px.dtype != np.uint8:
            raise TypeError(f"ImageBuf pixels must be uint8, got {px.dtype}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise DegenerateImage("image must be at least 1x1")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def data(self) -> bytes:
        return np.ascontiguousarray(self.pixels).tobytes()

    def __eq__(self, other):
        if not isinstance(other, ImageBuf):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(np.array_equal(self.pixels, other.pixels))

    __hash__ = None


@dataclass(frozen=True)
class GrayImage:
    pixels: np.ndarray  # (h, w) float32 in [0, 1]

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 2:
            raise UnsupportedChannels(f"GrayImage needs a 2-d array, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise DegenerateImage("image must be at least 1x1")
        if not (px.min() >= 0.0 and px.max() <= 1.0):
            raise ValueError("GrayImage values must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other):
        if not isinstance(other, GrayImage):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(np.array_equal(self.pixels, other.pixels))

    __hash__ = None


@dataclass(frozen=True)
class CropBox:
    """Axis-aligned rectangle, top-left corner plus size, in pixels."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise NegativeDimension(f"box needs w >= 1 and h >= 1, got w={self.w} h={self.h}")

    @property
    def area(self) -> int:
        return self.w * self.h

    def fits(self, width: int, height: int) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x + self.w <= width and self.y + self.h <= height

    def iou(self, other: "CropBox") -> float:
        ix = max(0, min(self.x + self.w, other.x + other.w) - max(self.x, other.x))
        iy = max(0, min(self.y + self.h, other.y + other.h) - max(self.y, other.y))
        inter = ix * iy
        return inter / float(self.area + other.area - inter)


Raster = Union[ImageBuf, GrayImage]


# --------------------------------------------------------------------------
# decoding / encoding


def decode_image(data: bytes) -> ImageBuf:
    """Decode a PNG or JPEG byte stream into an 8-bit :class:`ImageBuf`."""
    if not (data.startswith(_PNG_MAGIC) or data.startswith(_JPEG_MAGIC)):
        raise UnsupportedFormat("only PNG and JPEG streams are supported")
    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            return _from_pil(im)
    except (OSError, SyntaxError, ValueError) as exc:
        raise CorruptStream(str(exc)) from exc


def _from_pil(im: Image.Image) -> ImageBuf:
    mode = im.mode
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        arr = np.asarray(im).astype(np.uint32)
        if mode == "I" and arr.max(initial=0) <= 255:
            return ImageBuf(arr.astype(np.uint8))
        return ImageBuf((arr >> 8).astype(np.uint8))
    if mode in ("L", "1", "LA"):
        return ImageBuf(np.asarray(im.convert("L"), dtype=np.uint8).copy())
    return ImageBuf(np.asarray(im.convert("RGB"), dtype=np.uint8).copy())


def _to_pil(img: ImageBuf) -> Image.Image:
    if img.channels == 1:
        return Image.fromarray(img.pixels[:, :, 0], mode="L")
    return Image.fromarray(img.pixels, mode="RGB")


def encode_png(img: ImageBuf) -> bytes:
    buf = io.BytesIO()
    _to_pil(img).save(buf, format="PNG")
    return buf.getvalue()


def encode_jpeg(img: ImageBuf, quality: int = 90) -> bytes:
    buf = io.BytesIO()
    _to_pil(img).save(buf, format="JPEG", quality=int(quality))
    return buf.getvalue()


def read_image(path) -> ImageBuf:
    return decode_image(Path(path).read_bytes())


def write_image(path, img: ImageBuf) -> None:
    path = Path(path)
    if path.suffix.lower() in (".jpg", ".jpeg"):
        path.write_bytes(encode_jpeg(img, quality=95))
    else:
        path.write_bytes(encode_png(img))


# --------------------------------------------------------------------------
# conversions and geometry


def to_grayscale(img: ImageBuf) -> GrayImage:
    px = img.pixels
    if px.shape[2] == 3:
        gray = px.astype(np.float64) @ LUMA_WEIGHTS / 255.0
    elif px.shape[2] == 1:
        gray = px[:, :, 0].astype(np.float64) / 255.0
    else:
        raise UnsupportedChannels(f"cannot convert {px.shape[2]} channels")
    return GrayImage(np.clip(gray, 0.0, 1.0).astype(np.float32))


def gray_to_buf(img: GrayImage) -> ImageBuf:
    return ImageBuf(np.round(np.clip(img.pixels, 0, 1) * 255.0).astype(np.uint8))


def _resize_float(arr: np.ndarray, width: int, height: int) -> np.ndarray:
    return np.asarray(Image.fromarray(arr, mode="F").resize((width, height), Image.BILINEAR))


def _resize_buf(img: ImageBuf, width: int, height: int) -> ImageBuf:
    if (width, height) == (img.width, img.height):
        return img
    out = np.asarray(_to_pil(img).resize((width, height), Image.BILINEAR))
    return ImageBuf(out.copy())


def min_edge_size(width: int, height: int, target: int) -> tuple[int, int]:
    """Output (width, height) whose shorter side is ``target``, aspect preserved."""
    short = min(width, height)
    scale = target / short
    if width <= height:
        return target, max(target, int(round(height * scale)))
    return max(target, int(round(width * scale))), target


def resize_min_edge(img: GrayImage, target: int = 300) -> GrayImage:
    """Rescale (up or down) so that the shorter side equals ``target``."""
    if target < 16:
        raise ParamOutOfRange(f"target must be >= 16, got {target}")
    if min(img.width, img.height) < 2:
        raise DegenerateImage("input min edge < 2")
    w, h = min_edge_size(img.width, img.height, target)
    if (w, h) == (img.width, img.height):
        return img
    return GrayImage(np.clip(_resize_float(img.pixels, w, h), 0.0, 1.0))


def flip_horizontal(img: Raster) -> Raster:
    return type(img)(np.ascontiguousarray(img.pixels[:, ::-1]))


def crop(img: Raster, box: CropBox) -> Raster:
    if not box.fits(img.width, img.height):
        raise BoxOutOfBounds(f"{box} outside {img.width}x{img.height} image")
    return type(img)(img.pixels[box.y:box.y + box.h, box.x:box.x + box.w].copy())


def rotate(img: ImageBuf, degrees: float) -> ImageBuf:
    """Rotate counter-clockwise about the image centre; same canvas, edge-replicated border."""
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    h, w = img.height, img.width
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    # maps output (row, col) to input (row, col); rows grow downward
    matrix = np.array([[c, s], [-s, c]])
    offset = np.array([cy, cx]) - matrix @ np.array([cy, cx])
    planes = [
        ndimage.affine_transform(img.pixels[:, :, k].astype(np.float32), matrix, offset=offset,
                                 order=1, mode="nearest")
        for k in range(img.channels)
    ]
    return ImageBuf(_to_u8(np.stack(planes, axis=2)))


def _to_u8(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.round(arr), 0, 255).astype(np.uint8)


# --------------------------------------------------------------------------
# attacks

ATTACK_KINDS = (
    "crop", "rotate", "flip-h", "gaussian-blur", "jpeg-recompress", "brightness",
    "contrast", "grayscale", "pad", "resize", "overlay-paste", "pixelate",
)

# kind -> {param: (low, high, default)}; None default means required
_PARAM_RANGES: dict[str, dict[str, tuple[float, float, Any]]] = {
    "crop": {"area": (0.05, 1.0, None), "x": (0.0, 1.0, 0.5), "y": (0.0, 1.0, 0.5)},
    "rotate": {"degrees": (-180.0, 180.0, None)},
    "flip-h": {},
    "gaussian-blur": {"sigma": (0.1, 10.0, None)},
    "jpeg-recompress": {"quality": (5, 100, None)},
    "brightness": {"factor": (0.2, 3.0, None)},
    "contrast": {"factor": (0.2, 3.0, None)},
    "grayscale": {},
    "pad": {"frac": (0.0, 1.0, None), "value": (0, 255, 0)},
    "resize": {"scale": (0.1, 4.0, None)},
    "overlay-paste": {
        "x": (1, 8192, None), "y": (1, 8192, None), "w": (1, 8192, None), "h": (1, 8192, None),
        "bg_w": (3, 8192, None), "bg_h": (3, 8192, None), "bg_noise": (0.0, 64.0, 6.0),
    },
    "pixelate": {"block": (1, 64, None)},
}


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def validated(self) -> dict:
        """Params with defaults filled in; raises ParamOutOfRange on any violation."""
        if self.kind not in _PARAM_RANGES:
            raise ParamOutOfRange(f"unknown attack kind {self.kind!r}")
        ranges = _PARAM_RANGES[self.kind]
        unknown = set(self.params) - set(ranges)
        if unknown:
            raise ParamOutOfRange(f"{self.kind}: unknown params {sorted(unknown)}")
        out = {}
        for name, (lo, hi, default) in ranges.items():
            value = self.params.get(name, default)
            if value is None:
                raise ParamOutOfRange(f"{self.kind}: missing param {name!r}")
            if not isinstance(value, (int, float)) or isinstance(value, bool) or not lo <= value <= hi:
                raise ParamOutOfRange(f"{self.kind}: {name}={value!r} outside [{lo}, {hi}]")
            out[name] = value
        if not 0 <= self.seed < 2**64:
            raise ParamOutOfRange("seed must fit in 64 bits")
        return out


@dataclass(frozen=True)
class OverlayRecord:
    background_id: str
    foreground_id: str
    box: CropBox


def _synthetic_background(width: int, height: int, noise: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    c0, c1 = rng.uniform(20, 235, size=(2, 3))
    t = np.linspace(0.0, 1.0, width)[None, :, None]
    u = np.linspace(0.0, 1.0, height)[:, None, None]
    mix = 0.5 * (t + u) if rng.random() < 0.5 else t
    bg = c0 * (1 - mix) + c1 * mix
    bg = np.broadcast_to(bg, (height, width, 3)) + rng.normal(0.0, noise, size=(height, width, 3))
    return _to_u8(bg)


def apply_attack(img: ImageBuf, spec: AttackSpec, image_id: str = "") -> tuple[ImageBuf, OverlayRecord | None]:
    """Apply one attack.  The result is a pure function of ``(img, spec)``."""
    p = spec.validated()
    kind = spec.kind
    px = img.pixels
    if kind == "crop":
        side = math.sqrt(p["area"])
        w = max(1, int(round(img.width * side)))
        h = max(1, int(round(img.height * side)))
        x = int(round((img.width - w) * p["x"]))
        y = int(round((img.height - h) * p["y"]))
        return crop(img, CropBox(x, y, w, h)), None
    if kind == "rotate":
        return rotate(img, p["degrees"]), None
    if kind == "flip-h":
        return flip_horizontal(img), None
    if kind == "gaussian-blur":
        sigma = p["sigma"]
        out = ndimage.gaussian_filter(px.astype(np.float32), sigma=(sigma, sigma, 0), mode="nearest")
        return ImageBuf(_to_u8(out)), None
    if kind == "jpeg-recompress":
        return decode_image(encode_jpeg(img, quality=int(p["quality"]))), None
    if kind == "brightness":
        return ImageBuf(_to_u8(px.astype(np.float32) * p["factor"])), None
    if kind == "contrast":
        mean = float(to_grayscale(img).pixels.mean()) * 255.0
        return ImageBuf(_to_u8(mean + (px.astype(np.float32) - mean) * p["factor"])), None
    if kind == "grayscale":
        return gray_to_buf(to_grayscale(img)), None
    if kind == "pad":
        dx = int(round(img.width * p["frac"]))
        dy = int(round(img.height * p["frac"]))
        out = np.pad(px, ((dy, dy), (dx, dx), (0, 0)), constant_values=int(p["value"]))
        return ImageBuf(out), None
    if kind == "resize":
        w = max(1, int(round(img.width * p["scale"])))
        h = max(1, int(round(img.height * p["scale"])))
        return _resize_buf(img, w, h), None
    if kind == "pixelate":
        block = int(p["block"])
        w = max(1, img.width // block)
        h = max(1, img.height // block)
        small = _to_pil(img).resize((w, h), Image.BILINEAR)
        out = np.asarray(small.resize((img.width, img.height), Image.NEAREST))
        return ImageBuf(out.copy()), None
    if kind == "overlay-paste":
        box = CropBox(int(p["x"]), int(p["y"]), int(p["w"]), int(p["h"]))
        bg_w, bg_h = int(p["bg_w"]), int(p["bg_h"])
        # strictly inside: at least one background pixel on every side
        if box.x < 1 or box.y < 1 or box.x + box.w > bg_w - 1 or box.y + box.h > bg_h - 1:
            raise ParamOutOfRange(f"paste box {box} not strictly inside {bg_w}x{bg_h} background")
        canvas = _synthetic_background(bg_w, bg_h, p["bg_noise"], spec.seed)
        fg = _resize_buf(img, box.w, box.h).pixels
        if fg.shape[2] == 1:
            fg = np.repeat(fg, 3, axis=2)
        canvas[box.y:box.y + box.h, box.x:box.x + box.w] = fg
        record = OverlayRecord(background_id=f"synthetic-{spec.seed}", foreground_id=image_id, box=box)
        return ImageBuf(canvas), record
    raise ParamOutOfRange(f"unknown attack kind {kind!r}")  # unreachable after validation


def resized_foreground(img: ImageBuf, box: CropBox) -> ImageBuf:
    """The foreground exactly as overlay-paste places it (RGB, box-sized)."""
    fg = _resize_buf(img, box.w, box.h).pixels
    if fg.shape[2] == 1:
        fg = np.repeat(fg, 3, axis=2)
    return ImageBuf(fg)


# --------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestRow:
    query_id: str
    source_id: str
    attack: AttackSpec


MANIFEST_HEADER = ["query_id", "source_reference_id", "attack_kind", "params_json", "seed"]


def read_manifest(path) -> list[ManifestRow]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise MalformedRow(f"bad manifest header: {header}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 5:
                raise MalformedRow(f"line {lineno}: expected 5 fields, got {len(rec)}")
            try:
                params = json.loads(rec[3]) if rec[3] else {}
                seed = int(rec[4])
            except ValueError as exc:
                raise MalformedRow(f"line {lineno}: {exc}") from exc
            rows.append(ManifestRow(rec[0], rec[1], AttackSpec(rec[2], params, seed)))
    return rows


def write_manifest(path, rows: list[ManifestRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for row in rows:
            writer.writerow([row.query_id, row.source_id, row.attack.kind,
                             json.dumps(row.attack.params, sort_keys=True), row.attack.seed])


def write_overlay_boxes(path, boxes: dict[str, CropBox]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image_id", "x", "y", "w", "h"])
        for image_id, b in boxes.items():
            writer.writerow([image_id, b.x, b.y, b.w, b.h])
