"""Procedural reference images and attack plans for desk-scale benchmarks.

Images are random compositions of ellipses, polygons, strokes and a smooth
colour field.  Shapes are never axis-aligned rectangles, so the overlay
detector has nothing rectangular to latch onto in attack-free images.
"""

from __future__ import annotations

import math

import numpy as np
from PIL import Image, ImageDraw, ImageFilter

from .imaging import AttackSpec, ImageBuf, ManifestRow


def _color(rng) -> tuple[int, int, int]:
    return tuple(int(v) for v in rng.integers(0, 256, size=3))


def procedural_image(seed: int, width: int = 320, height: int = 320, n_shapes: int = 40) -> ImageBuf:
    """Deterministic textured RGB image for a given seed."""
    rng = np.random.default_rng(seed)
    # low-frequency colour field
    coarse = rng.uniform(0, 255, size=(4, 4, 3)).astype(np.uint8)
    field = Image.fromarray(coarse, mode="RGB").resize((width, height), Image.BICUBIC)
    canvas = field.copy()
    draw = ImageDraw.Draw(canvas)
    scale = min(width, height)
    for _ in range(n_shapes):
        kind = rng.integers(0, 4)
        cx, cy = rng.uniform(0, width), rng.uniform(0, height)
        size = scale * rng.uniform(0.03, 0.18)
        if kind == 0:
            rx, ry = size, size * rng.uniform(0.3, 1.0)
            draw.ellipse([cx - rx, cy - ry, cx + rx, cy + ry], fill=_color(rng))
        elif kind == 1:
            n = int(rng.integers(3, 7))
            start = rng.uniform(0, 2 * math.pi)
            pts = [(cx + size * rng.uniform(0.5, 1.0) * math.cos(start + 2 * math.pi * k / n),
                    cy + size * rng.uniform(0.5, 1.0) * math.sin(start + 2 * math.pi * k / n)) for k in range(n)]
            draw.polygon(pts, fill=_color(rng))
        elif kind == 2:
            ang = rng.uniform(0, math.pi)
            dx, dy = 2 * size * math.cos(ang), 2 * size * math.sin(ang)
            draw.line([cx - dx, cy - dy, cx + dx, cy + dy], fill=_color(rng), width=int(rng.integers(2, 6)))
        else:
            r = size * 0.6
            draw.ellipse([cx - r, cy - r, cx + r, cy + r], outline=_color(rng), width=int(rng.integers(2, 5)))
    canvas = canvas.filter(ImageFilter.GaussianBlur(0.6))
    px = np.asarray(canvas, dtype=np.float32)
    px += rng.normal(0.0, 3.0, size=px.shape)
    return ImageBuf(np.clip(np.round(px), 0, 255).astype(np.uint8))


def random_size(rng, lo: int = 300, hi: int = 420) -> tuple[int, int]:
    return int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1))


# attack kinds exercised by the default benchmark plan, with sampling rules
BENCH_KINDS = ("crop", "rotate", "flip-h", "gaussian-blur", "jpeg-recompress", "overlay-paste",
               "brightness", "contrast", "grayscale", "pad", "resize", "pixelate")


def sample_attack(kind: str, rng, src_size: tuple[int, int]) -> AttackSpec:
    """Draw parameters for ``kind`` in the moderate range used for benchmarking."""
    seed = int(rng.integers(0, 2**63))
    if kind == "crop":
        params = {"area": round(float(rng.uniform(0.35, 0.8)), 3),
                  "x": round(float(rng.uniform(0, 1)), 3), "y": round(float(rng.uniform(0, 1)), 3)}
    elif kind == "rotate":
        params = {"degrees": round(float(rng.uniform(-30, 30)), 2)}
    elif kind == "gaussian-blur":
        params = {"sigma": round(float(rng.uniform(0.8, 2.0)), 2)}
    elif kind == "jpeg-recompress":
        params = {"quality": int(rng.integers(15, 60))}
    elif kind == "brightness":
        params = {"factor": round(float(rng.uniform(0.5, 1.6)), 2)}
    elif kind == "contrast":
        params = {"factor": round(float(rng.uniform(0.5, 1.6)), 2)}
    elif kind == "pad":
        params = {"frac": round(float(rng.uniform(0.05, 0.3)), 3), "value": int(rng.integers(0, 256))}
    elif kind == "resize":
        params = {"scale": round(float(rng.uniform(0.5, 1.8)), 2)}
    elif kind == "pixelate":
        params = {"block": int(rng.integers(2, 4))}
    elif kind == "overlay-paste":
        bg_w, bg_h = random_size(rng, 420, 560)
        frac = float(rng.uniform(0.45, 0.7))
        sw, sh = src_size
        scale = frac * min(bg_w, bg_h) / max(sw, sh)
        w, h = max(8, int(round(sw * scale))), max(8, int(round(sh * scale)))
        x = int(rng.integers(16, bg_w - w - 16))
        y = int(rng.integers(16, bg_h - h - 16))
        params = {"x": x, "y": y, "w": w, "h": h, "bg_w": bg_w, "bg_h": bg_h}
    else:
        params = {}
    return AttackSpec(kind, params, seed)


def attack_plan(reference_ids: list[str], sizes: dict[str, tuple[int, int]], n_queries: int,
                seed: int, kinds=BENCH_KINDS) -> list[ManifestRow]:
    """Manifest rows cycling through ``kinds`` over randomly chosen references."""
    rng = np.random.default_rng(seed)
    sources = rng.choice(len(reference_ids), size=n_queries, replace=n_queries > len(reference_ids))
    rows = []
    for i, src in enumerate(sources):
        ref = reference_ids[int(src)]
        kind = kinds[i % len(kinds)]
        rows.append(ManifestRow(f"q{i:05d}", ref, sample_attack(kind, rng, sizes[ref])))
    return rows
