"""Scanpath images.

Saccades are drawn first as straight segments coloured along a blue-to-green
ramp by temporal order; fixation markers go on top, their shape, colour and
size set by duration level. Rasterization tests pixel centres only, so output
is bit-exact for a given input.

Pixel (row i, col j) has its centre at (j + 0.5, i + 0.5) in image space.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .core import SCREEN_H, Scanpath, level_of  # noqa: F401  (level_of re-exported)
from .errors import DimMismatch, EmptyScanpath, IndexOutOfRange, StorageError

RED = (255, 0, 0)
PINK = (255, 105, 180)
YELLOW = (255, 255, 0)
WHITE = (255, 255, 255)
MARKER_COLORS = {1: RED, 2: PINK, 3: YELLOW, 4: WHITE}

REFERENCE_MARKER_HEIGHT = 224
# outer/inner radius ratio of a regular five-pointed star
STAR_INNER_RATIO = math.sin(math.radians(18)) / math.sin(math.radians(54))


@dataclass(frozen=True)
class RenderConfig:
    """Raster geometry.

    ``saccade_width`` is in pixels at a 1050 px tall screen and
    ``marker_radius_base`` in pixels at a 224 px tall image; both scale with
    ``out_h``. The drawn saccade width never drops below one pixel.
    ``full_then_downsample`` renders at screen resolution and box-filters to
    the output size instead of drawing at the output size directly.
    """

    out_w: int = 224
    out_h: int = 224
    background: tuple = (0, 0, 0)
    saccade_width: float = 2.0
    marker_radius_base: tuple = (3.0, 4.0, 5.0, 6.0)
    antialias: bool = False
    full_then_downsample: bool = False

    def __post_init__(self):
        if self.out_w < 32 or self.out_h < 32:
            raise ValueError("image must be at least 32x32")
        if self.saccade_width < 1:
            raise ValueError("saccade_width must be >= 1")
        r = self.marker_radius_base
        if len(r) != 4 or not all(a < b for a, b in zip(r, r[1:])):
            raise ValueError("marker radii must be four strictly increasing values")

    def marker_radius(self, level: int) -> float:
        return self.marker_radius_base[level - 1] * self.out_h / REFERENCE_MARKER_HEIGHT

    @property
    def line_width(self) -> float:
        return max(1.0, self.saccade_width * self.out_h / SCREEN_H)


@dataclass(frozen=True)
class ScanpathImage:
    w: int
    h: int
    pixels: bytes  # row-major RGB8

    def __post_init__(self):
        if len(self.pixels) != self.w * self.h * 3:
            raise ValueError(f"buffer length {len(self.pixels)} != {self.w}*{self.h}*3")

    def array(self) -> np.ndarray:
        """Read-only (h, w, 3) uint8 view."""
        return np.frombuffer(self.pixels, dtype=np.uint8).reshape(self.h, self.w, 3)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "ScanpathImage":
        arr = np.ascontiguousarray(arr, dtype=np.uint8)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise DimMismatch(f"expected (h, w, 3) array, got {arr.shape}")
        return cls(arr.shape[1], arr.shape[0], arr.tobytes())


def saccade_color(i: int, n_saccades: int) -> tuple[int, int, int]:
    """Colour of saccade ``i`` of ``n_saccades`` on the winter ramp (blue to green)."""
    if n_saccades < 1 or not 0 <= i < n_saccades:
        raise IndexOutOfRange(f"saccade index {i} outside [0, {n_saccades})")
    t = i / (n_saccades - 1) if n_saccades > 1 else 0.0
    # round half up, not half-to-even
    return 0, int(math.floor(255 * t + 0.5)), int(math.floor(255 * (1 - t / 2) + 0.5))


class Canvas:
    """RGB raster with pixel-centre coverage primitives."""

    def __init__(self, w: int, h: int, background=(0, 0, 0)):
        self.w, self.h = w, h
        self.buf = np.empty((h, w, 3), dtype=np.uint8)
        self.buf[:] = background

    def _grid(self, x0, y0, x1, y1):
        j0, j1 = max(0, math.floor(x0)), min(self.w, math.ceil(x1) + 1)
        i0, i1 = max(0, math.floor(y0)), min(self.h, math.ceil(y1) + 1)
        if j0 >= j1 or i0 >= i1:
            return None
        px = np.arange(j0, j1, dtype=np.float64) + 0.5
        py = np.arange(i0, i1, dtype=np.float64)[:, None] + 0.5
        return (slice(i0, i1), slice(j0, j1)), px, py

    def _paint(self, region, mask, color):
        self.buf[region][mask] = color

    def segment(self, p0, p1, width: float, color):
        (x0, y0), (x1, y1) = p0, p1
        hw = width / 2.0
        g = self._grid(min(x0, x1) - hw, min(y0, y1) - hw, max(x0, x1) + hw, max(y0, y1) + hw)
        if g is None:
            return
        region, px, py = g
        dx, dy = x1 - x0, y1 - y0
        l2 = dx * dx + dy * dy
        if l2 > 0:
            t = np.clip(((px - x0) * dx + (py - y0) * dy) / l2, 0.0, 1.0)
        else:
            t = np.zeros((py.size, px.size))
        qx = px - (x0 + t * dx)
        qy = py - (y0 + t * dy)
        self._paint(region, qx * qx + qy * qy <= hw * hw, color)

    def disk(self, c, r: float, color):
        cx, cy = c
        g = self._grid(cx - r, cy - r, cx + r, cy + r)
        if g is None:
            return
        region, px, py = g
        self._paint(region, (px - cx) ** 2 + (py - cy) ** 2 <= r * r, color)

    def polygon(self, verts, color):
        """Fill by the even-odd rule."""
        vs = [(float(x), float(y)) for x, y in verts]
        xs, ys = [v[0] for v in vs], [v[1] for v in vs]
        g = self._grid(min(xs), min(ys), max(xs), max(ys))
        if g is None:
            return
        region, px, py = g
        inside = np.zeros((py.size, px.size), dtype=bool)
        n = len(vs)
        for k in range(n):
            xa, ya = vs[k]
            xb, yb = vs[(k + 1) % n]
            if ya == yb:
                continue
            crosses = (ya > py) != (yb > py)
            with np.errstate(over="ignore", invalid="ignore"):  # non-crossing rows may overflow; masked out
                x_at = xa + (py - ya) * (xb - xa) / (yb - ya)
            inside ^= crosses & (px < x_at)
        self._paint(region, inside, color)

    def rect(self, x0, y0, x1, y1, color):
        """Pixels whose centres lie in the closed box."""
        g = self._grid(x0, y0, x1, y1)
        if g is None:
            return
        region, px, py = g
        self._paint(region, ((px >= x0) & (px <= x1)) & ((py >= y0) & (py <= y1)), color)


def regular_polygon(c, r: float, n: int, start_deg: float = -90.0):
    cx, cy = c
    return [(cx + r * math.cos(math.radians(start_deg + 360.0 * k / n)),
             cy + r * math.sin(math.radians(start_deg + 360.0 * k / n))) for k in range(n)]


def star_polygon(c, r: float, points: int = 5):
    cx, cy = c
    out = []
    for k in range(2 * points):
        rad = r if k % 2 == 0 else r * STAR_INNER_RATIO
        a = math.radians(-90.0 + 180.0 * k / points)
        out.append((cx + rad * math.cos(a), cy + rad * math.sin(a)))
    return out


def draw_marker(canvas: Canvas, c, level: int, r: float):
    if level == 1:
        canvas.disk(c, r, RED)
    elif level == 2:
        canvas.polygon(star_polygon(c, r), PINK)
    elif level == 3:
        canvas.polygon(regular_polygon(c, r, 5), YELLOW)
    else:
        # '+' of span 2r per bar
        th = max(2.0, r / 2.0) / 2.0
        cx, cy = c
        canvas.rect(cx - r, cy - th, cx + r, cy + th, WHITE)
        canvas.rect(cx - th, cy - r, cx + th, cy + r, WHITE)


def _draw(sp: Scanpath, cfg: RenderConfig) -> np.ndarray:
    sx, sy = cfg.out_w / sp.screen_w, cfg.out_h / sp.screen_h
    pts = [(f.cx * sx, f.cy * sy) for f in sp.fixations]
    levels = [f.level for f in sp.fixations]
    canvas = Canvas(cfg.out_w, cfg.out_h, cfg.background)
    n_sacc = len(pts) - 1
    lw = cfg.line_width
    for i in range(n_sacc):
        canvas.segment(pts[i], pts[i + 1], lw, saccade_color(i, n_sacc))
    for p, lv in zip(pts, levels):
        draw_marker(canvas, p, lv, cfg.marker_radius(lv))
    return canvas.buf


def box_downsample(arr: np.ndarray, factor: int) -> np.ndarray:
    """Average non-overlapping factor x factor blocks, rounding half up."""
    h, w, c = arr.shape
    blocks = arr[: h - h % factor, : w - w % factor].astype(np.int64)
    blocks = blocks.reshape(h // factor, factor, w // factor, factor, c).sum(axis=(1, 3))
    n = factor * factor
    return ((2 * blocks + n) // (2 * n)).astype(np.uint8)


def render_scanpath(sp: Scanpath, cfg: Optional[RenderConfig] = None) -> ScanpathImage:
    cfg = cfg or RenderConfig()
    if len(sp.fixations) == 0:
        raise EmptyScanpath(f"scanpath {sp.trial_id!r} has no fixations")
    if cfg.full_then_downsample:
        full = RenderConfig(int(sp.screen_w), int(sp.screen_h), cfg.background, cfg.saccade_width,
                            cfg.marker_radius_base, cfg.antialias)
        big = Image.fromarray(_draw(sp, full))
        arr = np.asarray(big.resize((cfg.out_w, cfg.out_h), Image.Resampling.BOX))
    elif cfg.antialias:
        ss = 4
        big = RenderConfig(cfg.out_w * ss, cfg.out_h * ss, cfg.background,
                           cfg.saccade_width, cfg.marker_radius_base)
        arr = box_downsample(_draw(sp, big), ss)
    else:
        arr = _draw(sp, cfg)
    return ScanpathImage.from_array(arr)


def image_to_array(img: ScanpathImage, dtype=np.float32) -> np.ndarray:
    """(3, h, w) array scaled to [0, 1], ready for the CNN."""
    return (img.array().transpose(2, 0, 1).astype(dtype)) / dtype(255.0)


def write_png(img: ScanpathImage, path) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(img.array(), mode="RGB").save(path, format="PNG", compress_level=6)
    except OSError as e:
        raise StorageError(f"cannot write PNG {path}: {e}") from e


def read_png(path) -> ScanpathImage:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    except OSError as e:
        raise StorageError(f"cannot read PNG {path}: {e}") from e
    return ScanpathImage.from_array(arr)
