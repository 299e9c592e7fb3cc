"""Map data model: orthographic pixel maps, colored 2.5D elevation grids and poses.

Pixel ``(u, v)`` of an :class:`OrthoMap` is column ``u`` and row ``v``; its
world position is ``origin + (u, v) * resolution``.  Arrays are stored
row-major with shape ``(height, width)`` or ``(height, width, 3)``.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_RESOLUTION = 0.1  # meters per pixel
MAX_PIXELS = 1 << 28
LUMA = (0.299, 0.587, 0.114)


class PixmapError(ValueError):
    """Raised for unreadable or malformed pixmap files."""


def normalize_angle(theta: float) -> float:
    """Wrap an angle into ``[-pi, pi)``."""
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped < 0.0:
        wrapped += 2.0 * math.pi
    wrapped -= math.pi
    # fmod/add rounding can land exactly on +pi
    if wrapped >= math.pi:
        wrapped -= 2.0 * math.pi
    return wrapped


def normalize_angles(theta: np.ndarray) -> np.ndarray:
    """Vectorized :func:`normalize_angle`."""
    wrapped = np.mod(np.asarray(theta, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi
    wrapped[wrapped >= np.pi] -= 2.0 * np.pi
    return wrapped


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    heading: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "heading", normalize_angle(float(self.heading)))


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class OrthoMap:
    """Top-down pixel map at a fixed metric scale.

    ``pixels`` holds intensities in ``[0, 255]`` (``uint8`` for anything read
    from or written to disk).  ``mask`` is ``True`` where a pixel carries scene
    information; ``None`` means every pixel is valid.
    """

    pixels: np.ndarray
    resolution: float = DEFAULT_RESOLUTION
    mask: np.ndarray | None = None
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        if pixels.ndim not in (2, 3) or (pixels.ndim == 3 and pixels.shape[2] != 3):
            raise ValueError(f"pixels must be HxW or HxWx3, got shape {pixels.shape}")
        if pixels.shape[0] < 1 or pixels.shape[1] < 1:
            raise ValueError("map must be at least 1x1")
        if not (self.resolution > 0 and math.isfinite(self.resolution)):
            raise ValueError(f"resolution must be positive, got {self.resolution}")
        if pixels.dtype != np.uint8:
            pixels = pixels.astype(np.float64)
            if not np.all(np.isfinite(pixels)) or pixels.min() < 0 or pixels.max() > 255:
                raise ValueError("pixel values must lie in [0, 255]")
        if self.mask is None:
            mask = np.ones(pixels.shape[:2], dtype=bool)
        else:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != pixels.shape[:2]:
                raise ValueError(f"mask shape {mask.shape} != map shape {pixels.shape[:2]}")
        object.__setattr__(self, "pixels", _frozen(pixels))
        object.__setattr__(self, "mask", _frozen(mask))
        object.__setattr__(self, "resolution", float(self.resolution))
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def width_px(self) -> int:
        return self.pixels.shape[1]

    @property
    def height_px(self) -> int:
        return self.pixels.shape[0]

    @property
    def channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else 3

    @property
    def is_grayscale(self) -> bool:
        return self.pixels.ndim == 2

    def valid_fraction(self) -> float:
        return float(self.mask.mean())

    def world_to_pixel(self, x: float, y: float) -> tuple[float, float]:
        """Continuous pixel coordinates ``(u, v)`` of a world point."""
        return (x - self.origin[0]) / self.resolution, (y - self.origin[1]) / self.resolution

    def pixel_to_world(self, u: float, v: float) -> tuple[float, float]:
        return self.origin[0] + u * self.resolution, self.origin[1] + v * self.resolution

    def __eq__(self, other):
        if not isinstance(other, OrthoMap):
            return NotImplemented
        return (
            self.resolution == other.resolution
            and self.origin == other.origin
            and self.pixels.shape == other.pixels.shape
            and np.array_equal(self.pixels, other.pixels)
            and np.array_equal(self.mask, other.mask)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ElevationGrid:
    """Colored 2.5D grid; ``heights`` is NaN for empty cells."""

    heights: np.ndarray
    colors: np.ndarray
    cell_size: float = DEFAULT_RESOLUTION

    def __post_init__(self):
        heights = np.asarray(self.heights, dtype=np.float64)
        colors = np.asarray(self.colors)
        if heights.ndim != 2 or heights.shape[0] < 1 or heights.shape[1] < 1:
            raise ValueError(f"heights must be a non-empty 2D array, got {heights.shape}")
        if colors.shape != heights.shape + (3,):
            raise ValueError(f"colors shape {colors.shape} must be {heights.shape + (3,)}")
        if np.any(np.isinf(heights)):
            raise ValueError("cell heights must be finite or NaN (empty)")
        if colors.min() < 0 or colors.max() > 255:
            raise ValueError("colors must lie in [0, 255]")
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        object.__setattr__(self, "heights", _frozen(heights))
        object.__setattr__(self, "colors", _frozen(colors.astype(np.uint8)))

    @property
    def cols(self) -> int:
        return self.heights.shape[1]

    @property
    def rows(self) -> int:
        return self.heights.shape[0]

    @property
    def occupied(self) -> np.ndarray:
        return ~np.isnan(self.heights)

    @classmethod
    def empty(cls, cols: int, rows: int, cell_size: float = DEFAULT_RESOLUTION) -> "ElevationGrid":
        return cls(
            np.full((rows, cols), np.nan), np.zeros((rows, cols, 3), np.uint8), cell_size
        )


# ---------------------------------------------------------------------------
# pixmap I/O


def mask_path_for(path: str | os.PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".mask.pgm")


def _read_header(data: bytes) -> tuple[bytes, list[int], int]:
    """Parse a binary netpbm header; return magic, [w, h, maxval], payload offset."""
    pos = 0
    tokens: list[bytes] = []
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise PixmapError("malformed pixmap: truncated header")
        if data[pos : pos + 1] == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise PixmapError("malformed pixmap: truncated header")
            pos = end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    pos += 1
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise PixmapError(f"malformed pixmap: unsupported magic {magic!r}")
    try:
        nums = [int(t) for t in tokens[1:]]
    except ValueError:
        raise PixmapError("malformed pixmap: non-numeric header field") from None
    return magic, nums, pos


def read_pixmap(path: str | os.PathLike) -> np.ndarray:
    """Read an 8-bit P5/P6 file into a ``uint8`` array."""
    data = Path(path).read_bytes()
    magic, (width, height, maxval), offset = _read_header(data)
    if width < 1 or height < 1:
        raise PixmapError(f"malformed pixmap: bad dimensions {width}x{height}")
    if width * height > MAX_PIXELS:
        raise PixmapError(f"pixmap dimensions overflow: {width}x{height}")
    if maxval != 255:
        raise PixmapError(f"malformed pixmap: only 8-bit maxval 255 supported, got {maxval}")
    channels = 1 if magic == b"P5" else 3
    size = width * height * channels
    payload = data[offset : offset + size]
    if len(payload) != size:
        raise PixmapError(
            f"malformed pixmap: expected {size} payload bytes, found {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype=np.uint8)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return arr.reshape(shape).copy()


def write_pixmap(path: str | os.PathLike, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        pixels = np.clip(np.rint(pixels), 0, 255).astype(np.uint8)
    if pixels.ndim == 2:
        magic = b"P5"
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot write array of shape {pixels.shape} as a pixmap")
    h, w = pixels.shape[:2]
    header = magic + b"\n%d %d\n255\n" % (w, h)
    Path(path).write_bytes(header + np.ascontiguousarray(pixels).tobytes())


def load_map(
    path: str | os.PathLike,
    resolution: float = DEFAULT_RESOLUTION,
    origin: tuple[float, float] = (0.0, 0.0),
) -> OrthoMap:
    """Load a P5/P6 map and its optional ``<stem>.mask.pgm`` sidecar."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"map file not found: {path}")
    pixels = read_pixmap(path)
    mask = None
    sidecar = mask_path_for(path)
    if sidecar.is_file():
        raw = read_pixmap(sidecar)
        if raw.ndim != 2 or raw.shape != pixels.shape[:2]:
            raise PixmapError(f"mask {sidecar} does not match map dimensions")
        mask = raw >= 128
    return OrthoMap(pixels, resolution, mask, origin)


def save_map(omap: OrthoMap, path: str | os.PathLike, with_mask: bool = False) -> None:
    """Write a map; a mask sidecar is written when some pixel is invalid or ``with_mask`` is set.

    Non-integer pixel values are rounded to ``uint8``.
    """
    path = Path(path)
    write_pixmap(path, omap.pixels)
    sidecar = mask_path_for(path)
    if with_mask or not omap.mask.all():
        write_pixmap(sidecar, np.where(omap.mask, 255, 0).astype(np.uint8))
    elif sidecar.exists():
        sidecar.unlink()


# ---------------------------------------------------------------------------
# elevation grid CSV


def load_elevation_csv(path: str | os.PathLike, cols: int, rows: int,
                       cell_size: float = DEFAULT_RESOLUTION) -> ElevationGrid:
    heights = np.full((rows, cols), np.nan)
    colors = np.zeros((rows, cols, 3), np.uint8)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["col", "row", "height", "r", "g", "b"]:
            raise ValueError(f"unexpected elevation CSV header: {reader.fieldnames}")
        for rec in reader:
            c, r = int(rec["col"]), int(rec["row"])
            if not (0 <= c < cols and 0 <= r < rows):
                raise ValueError(f"cell ({c}, {r}) outside {cols}x{rows} grid")
            h = float(rec["height"])
            if not math.isfinite(h):
                raise ValueError(f"cell ({c}, {r}) has non-finite height")
            heights[r, c] = h
            colors[r, c] = (int(rec["r"]), int(rec["g"]), int(rec["b"]))
    return ElevationGrid(heights, colors, cell_size)


def save_elevation_csv(grid: ElevationGrid, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["col", "row", "height", "r", "g", "b"])
        rows, cols = np.nonzero(grid.occupied)
        for r, c in zip(rows, cols):
            red, green, blue = (int(x) for x in grid.colors[r, c])
            writer.writerow([c, r, repr(float(grid.heights[r, c])), red, green, blue])


# ---------------------------------------------------------------------------
# operations


def to_grayscale(omap: OrthoMap) -> OrthoMap:
    """Luminance ``round(0.299 R + 0.587 G + 0.114 B)``; grayscale passes through."""
    if omap.is_grayscale:
        return omap
    rgb = omap.pixels.astype(np.float64)
    luma = rgb[..., 0] * LUMA[0] + rgb[..., 1] * LUMA[1] + rgb[..., 2] * LUMA[2]
    gray = np.clip(np.floor(luma + 0.5), 0, 255).astype(np.uint8)
    return OrthoMap(gray, omap.resolution, omap.mask, omap.origin)


def render_orthomosaic(grid: ElevationGrid, resolution: float = DEFAULT_RESOLUTION) -> OrthoMap:
    """Project an elevation grid onto the ground plane (nearest cell per pixel)."""
    if not resolution > 0:
        raise ValueError("resolution must be positive")
    occupied = grid.occupied
    if not occupied.any():
        raise ValueError("no surface to render")
    # tolerance absorbs float noise in e.g. 4 * 0.1 / 0.05
    width = math.ceil(grid.cols * grid.cell_size / resolution - 1e-9)
    height = math.ceil(grid.rows * grid.cell_size / resolution - 1e-9)
    cu = np.minimum(((np.arange(width) + 0.5) * resolution / grid.cell_size).astype(np.int64),
                    grid.cols - 1)
    cv = np.minimum(((np.arange(height) + 0.5) * resolution / grid.cell_size).astype(np.int64),
                    grid.rows - 1)
    mask = occupied[np.ix_(cv, cu)]
    pixels = grid.colors[np.ix_(cv, cu)].copy()
    pixels[~mask] = 0
    return OrthoMap(pixels, resolution, mask)


def crop_window(omap: OrthoMap, u: int, v: int, w: int, h: int) -> OrthoMap:
    """The ``w`` x ``h`` sub-map whose upper-left pixel is ``(u, v)``."""
    if w < 1 or h < 1 or u < 0 or v < 0 or u + w > omap.width_px or v + h > omap.height_px:
        raise ValueError(
            f"window out of bounds: ({u}, {v}, {w}x{h}) in {omap.width_px}x{omap.height_px} map"
        )
    return OrthoMap(
        omap.pixels[v : v + h, u : u + w],
        omap.resolution,
        omap.mask[v : v + h, u : u + w],
        omap.pixel_to_world(u, v),
    )


def rotate_nearest(
    pixels: np.ndarray,
    mask: np.ndarray,
    theta: float,
    center_src: tuple[float, float],
    out_shape: tuple[int, int],
) -> tuple[np.ndarray, np.ndarray]:
    """Sample an ``out_shape`` patch from ``pixels`` rotated by ``theta``.

    Output pixel ``(i, j)`` (column, row) sits at offset
    ``(i - (w-1)/2, j - (h-1)/2)`` from the patch center; that offset is
    rotated by ``theta`` and added to ``center_src`` (continuous ``(u, v)`` in
    the source) and the nearest source pixel is taken.  Samples falling
    outside the source are returned as invalid with value 0.
    """
    h, w = out_shape
    di = np.arange(w) - (w - 1) / 2.0
    dj = np.arange(h) - (h - 1) / 2.0
    oi, oj = np.meshgrid(di, dj)
    c, s = math.cos(theta), math.sin(theta)
    su = np.floor(center_src[0] + c * oi - s * oj + 0.5).astype(np.int64)
    sv = np.floor(center_src[1] + s * oi + c * oj + 0.5).astype(np.int64)
    inside = (su >= 0) & (su < pixels.shape[1]) & (sv >= 0) & (sv < pixels.shape[0])
    su_c = np.clip(su, 0, pixels.shape[1] - 1)
    sv_c = np.clip(sv, 0, pixels.shape[0] - 1)
    out = pixels[sv_c, su_c].copy()
    out_mask = mask[sv_c, su_c] & inside
    out[~inside] = 0
    return out, out_mask
