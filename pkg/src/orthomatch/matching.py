"""Sliding-window template matching with SSD, SAD, NCC and WNCC scorers.

Arrays follow numpy's ``(row, column)`` order, so a template of width ``m``
and height ``n`` has shape ``(n, m)`` and a placement ``(u, v)`` puts the
template's upper-left pixel at column ``u``, row ``v`` of the map.

WNCC is the center-weighted correlation

    sum w(s,t) |R(u+s,v+t) - Rbar(u,v)| |P(s,t) - Pbar|
    ---------------------------------------------------
    sqrt( sum (R(u+s,v+t) - Rbar(u,v))^2 * sum (P(s,t) - Pbar)^2 )

with absolute deviations in the numerator, so scores are never negative.
"""

from __future__ import annotations

import enum
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .gridmap import OrthoMap, to_grayscale, write_pixmap

TIE_RTOL = 1e-10
SFLD_MAGIC = b"SFLD"


class Method(str, enum.Enum):
    SSD = "SSD"
    SAD = "SAD"
    NCC = "NCC"
    WNCC = "WNCC"

    @property
    def maximize(self) -> bool:
        return self in (Method.NCC, Method.WNCC)

    @property
    def code(self) -> int:
        return _METHOD_CODES[self]

    @classmethod
    def parse(cls, value: "str | Method") -> "Method":
        if isinstance(value, Method):
            return value
        return cls(str(value).upper())


_METHOD_CODES = {Method.SSD: 0, Method.SAD: 1, Method.NCC: 2, Method.WNCC: 3}


class KernelKind(str, enum.Enum):
    PAPER_LITERAL = "paper-literal"
    CORRECTED = "corrected"
    UNIFORM = "uniform"


class DegeneratePatch(ValueError):
    """A window or template has zero intensity variance."""


class NoValidPlacement(ValueError):
    """Every placement of the template was degenerate."""


@dataclass(frozen=True, eq=False)
class WeightKernel:
    m: int
    n: int
    weights: np.ndarray  # shape (n, m)
    kind: KernelKind

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.shape != (self.n, self.m):
            raise ValueError(f"weights shape {w.shape} != ({self.n}, {self.m})")
        if np.any(w < 0) or not np.any(w > 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite, non-negative, and not all zero")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    def at(self, s: int, t: int) -> float:
        """Weight at 1-based column ``s`` and row ``t``."""
        return float(self.weights[t - 1, s - 1])


def _triangle(size: int) -> np.ndarray:
    # Peak 1 at the middle pixel(s), 0 at both end pixels.
    if size <= 2:
        return np.ones(size)
    idx = np.arange(1, size + 1, dtype=np.float64)
    half = (size - 1) / 2.0
    tri = np.clip(1.0 - np.abs(idx - (size + 1) / 2.0) / half, 0.0, 1.0)
    return tri / tri.max()


def make_kernel(kind: "KernelKind | str", m: int, n: int) -> WeightKernel:
    """Build an ``m`` (width) by ``n`` (height) weight kernel.

    ``paper-literal`` evaluates ``|2 - |m/2 - s| * |n/2 - t||`` at 1-based
    ``(s, t)``.  That form is 2 near the center and grows outward, so the
    default for matching is ``corrected``: a separable triangular window equal
    to 1 at the center and 0 on the border rows and columns.
    """
    kind = KernelKind(kind)
    if m < 1 or n < 1:
        raise ValueError("kernel dimensions must be >= 1")
    if kind is KernelKind.PAPER_LITERAL:
        s = np.arange(1, m + 1, dtype=np.float64)
        t = np.arange(1, n + 1, dtype=np.float64)
        weights = np.abs(2.0 - np.outer(np.abs(n / 2.0 - t), np.abs(m / 2.0 - s)))
    elif kind is KernelKind.CORRECTED:
        weights = np.outer(_triangle(n), _triangle(m))
    else:
        weights = np.ones((n, m))
    return WeightKernel(m, n, weights, kind)


@dataclass(frozen=True, eq=False)
class ScoreField:
    """Scores indexed ``[v, u]``; degenerate placements hold the method's worst value (±inf)."""

    scores: np.ndarray
    method: Method

    @property
    def placements_w(self) -> int:
        return self.scores.shape[1]

    @property
    def placements_h(self) -> int:
        return self.scores.shape[0]

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.scores)

    def __eq__(self, other):
        if not isinstance(other, ScoreField):
            return NotImplemented
        return self.method == other.method and np.array_equal(self.scores, other.scores)

    __hash__ = None


@dataclass(frozen=True)
class MatchResult:
    best_u: int
    best_v: int
    best_score: float
    field: ScoreField


def _gray(img) -> np.ndarray:
    if isinstance(img, OrthoMap):
        img = to_grayscale(img).pixels
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a single-channel image, got shape {arr.shape}")
    return arr


def _same_shape(window: np.ndarray, template: np.ndarray) -> None:
    if window.shape != template.shape:
        raise ValueError(f"dimension mismatch: window {window.shape} vs template {template.shape}")


def template_mean(template) -> float:
    """Arithmetic mean over every template pixel, masked or not."""
    arr = _gray(template)
    if arr.size == 0:
        raise ValueError("empty template")
    return float(arr.sum() / arr.size)


def window_mean(omap, u: int, v: int, m: int, n: int) -> float:
    arr = _gray(omap)
    if m < 1 or n < 1 or u < 0 or v < 0 or u + m > arr.shape[1] or v + n > arr.shape[0]:
        raise ValueError(f"window out of bounds: ({u}, {v}, {m}x{n}) in {arr.shape[1]}x{arr.shape[0]}")
    return template_mean(arr[v : v + n, u : u + m])


def score_ssd(window, template) -> float:
    r, p = _gray(window), _gray(template)
    _same_shape(r, p)
    return float(np.sum((r - p) ** 2))


def score_sad(window, template) -> float:
    r, p = _gray(window), _gray(template)
    _same_shape(r, p)
    return float(np.sum(np.abs(r - p)))


def _deviations(r: np.ndarray, p: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    dr = r - template_mean(r)
    dp = p - template_mean(p)
    denom = float(np.sum(dr * dr)) * float(np.sum(dp * dp))
    if denom == 0.0:
        raise DegeneratePatch("degenerate patch: zero intensity variance")
    return dr, dp, math.sqrt(denom)


def score_ncc(window, template) -> float:
    r, p = _gray(window), _gray(template)
    _same_shape(r, p)
    dr, dp, denom = _deviations(r, p)
    return min(1.0, max(-1.0, float(np.sum(dr * dp)) / denom))


def score_wncc(window, template, kernel: WeightKernel) -> float:
    r, p = _gray(window), _gray(template)
    _same_shape(r, p)
    if kernel.weights.shape != r.shape:
        raise ValueError(f"kernel {kernel.weights.shape} does not match template {r.shape}")
    dr, dp, denom = _deviations(r, p)
    return float(np.sum(kernel.weights * np.abs(dr) * np.abs(dp))) / denom


# ---------------------------------------------------------------------------
# exhaustive search


def _is_integral(arr: np.ndarray) -> bool:
    return bool(np.all(arr == np.rint(arr)))


def as_kernel_image(arr: np.ndarray) -> tuple[np.ndarray, bool]:
    """Integer-valued images run on ``int64`` so sums and moments are exact."""
    if _is_integral(arr):
        return np.ascontiguousarray(arr, dtype=np.int64), True
    return np.ascontiguousarray(arr, dtype=np.float64), False


class _Prepared:
    """Template-side quantities shared by every placement."""

    def __init__(self, image, template, method: Method, kernel: WeightKernel | None):
        self.image, self.exact = as_kernel_image(_gray(image))
        tpl = np.ascontiguousarray(_gray(template))
        self.method = method
        n, m = tpl.shape
        H, W = self.image.shape
        if m > W or n > H:
            raise ValueError(f"template {m}x{n} larger than map {W}x{H}")
        self.shape = (H - n + 1, W - m + 1)
        if method in (Method.SSD, Method.SAD):
            integral = _is_integral(tpl)
            self.tpl = tpl.astype(np.int64) if integral and self.exact else tpl
            if not (integral and self.exact):
                self.image = self.image.astype(np.float64)
        else:
            dev = tpl - tpl.sum() / tpl.size
            self.tss = float(np.sum(dev * dev))
            if self.tss == 0.0:
                raise DegeneratePatch("degenerate patch: template has zero variance")
            self.tdev = np.ascontiguousarray(dev if method is Method.NCC else np.abs(dev))
            self.integer = self.exact and _is_integral(tpl)
            if self.integer:
                itpl = tpl.astype(np.int64)
                k = itpl.size
                self.itpl = np.ascontiguousarray(itpl)
                self.tsum = int(itpl.sum())
                self.tssk = k * int((itpl * itpl).sum()) - self.tsum * self.tsum
                self.tabsk = np.abs(k * itpl - self.tsum).astype(np.float64)
        if method is Method.WNCC:
            if kernel is None:
                raise ValueError("WNCC requires a weight kernel")
            if kernel.weights.shape != tpl.shape:
                raise ValueError(f"kernel {kernel.weights.shape} does not match template {tpl.shape}")
            self.weights = np.ascontiguousarray(kernel.weights)
            if self.integer:
                self.wtabs = np.ascontiguousarray(self.weights * self.tabsk)

    def run_rows(self, v0: int, v1: int, out: np.ndarray) -> None:
        if self.method is Method.SAD:
            _kernels.sad_rows(self.image, self.tpl, v0, v1, out)
        elif self.method is Method.SSD:
            _kernels.ssd_rows(self.image, self.tpl, v0, v1, out)
        elif self.method is Method.NCC:
            if self.integer:
                _kernels.ncc_int_rows(self.image, self.itpl, self.tsum, self.tssk, v0, v1, out)
            else:
                _kernels.ncc_rows(self.image, self.tdev, self.tss, self.exact, v0, v1, out)
        elif self.integer:
            _kernels.wncc_int_rows(self.image, self.wtabs, self.tssk, v0, v1, out)
        else:
            _kernels.wncc_rows(self.image, self.weights, self.tdev, self.tss, self.exact, v0, v1, out)


def best_placement(scores: np.ndarray, method: Method) -> tuple[int, int]:
    """Row-major first placement within ``TIE_RTOL`` of the optimum.

    The tolerance only absorbs rounding between scores that are equal in
    exact arithmetic; for integer-valued SSD/SAD fields it is an exact tie.
    """
    valid = np.isfinite(scores)
    if not valid.any():
        raise NoValidPlacement("no valid placement: every window is degenerate")
    if method.maximize:
        opt = scores[valid].max()
        hit = valid & (scores >= opt - TIE_RTOL * max(1.0, abs(opt)))
    else:
        opt = scores[valid].min()
        hit = valid & (scores <= opt + TIE_RTOL * max(1.0, abs(opt)))
    flat = int(np.argmax(hit.ravel()))
    v, u = divmod(flat, scores.shape[1])
    return u, v


def _result(scores: np.ndarray, method: Method) -> MatchResult:
    u, v = best_placement(scores, method)
    scores.flags.writeable = False
    return MatchResult(u, v, float(scores[v, u]), ScoreField(scores, method))


def match_template(omap, template, method: "Method | str", kernel: WeightKernel | None = None) -> MatchResult:
    """Score every placement ``u in [0, W-M]``, ``v in [0, H-N]`` and return the optimum."""
    method = Method.parse(method)
    prep = _Prepared(omap, template, method, kernel)
    out = np.empty(prep.shape)
    prep.run_rows(0, prep.shape[0], out)
    return _result(out, method)


def _row_blocks(rows: int, workers: int) -> list[tuple[int, int]]:
    nblocks = min(rows, workers * 4)
    edges = np.linspace(0, rows, nblocks + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def match_template_parallel(
    omap, template, method: "Method | str", kernel: WeightKernel | None = None, workers: int = 1
) -> MatchResult:
    """Same result as :func:`match_template`, with placement rows split over threads."""
    if workers < 1:
        raise ValueError("workers must be >= 1")
    method = Method.parse(method)
    prep = _Prepared(omap, template, method, kernel)
    out = np.empty(prep.shape)
    if workers == 1:
        prep.run_rows(0, prep.shape[0], out)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(prep.run_rows, a, b, out) for a, b in _row_blocks(prep.shape[0], workers)]
            for f in futures:
                f.result()
    return _result(out, method)


def default_workers() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


# ---------------------------------------------------------------------------
# score field export


def save_score_field(field: ScoreField, path: str | os.PathLike) -> None:
    """Raw little-endian float32 dump behind a 16-byte header.

    Header: ``b"SFLD"``, width (u32), height (u32), method code (u32).
    """
    header = SFLD_MAGIC + struct.pack("<III", field.placements_w, field.placements_h, field.method.code)
    Path(path).write_bytes(header + field.scores.astype("<f4").tobytes())


def load_score_field(path: str | os.PathLike) -> ScoreField:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != SFLD_MAGIC:
        raise ValueError("not a score field file")
    w, h, code = struct.unpack("<III", data[4:16])
    if len(data) != 16 + 4 * w * h:
        raise ValueError("score field payload size mismatch")
    method = {v: k for k, v in _METHOD_CODES.items()}[code]
    scores = np.frombuffer(data, dtype="<f4", offset=16).reshape(h, w).astype(np.float64)
    return ScoreField(scores, method)


def heatmap(field: ScoreField) -> np.ndarray:
    """Min-max normalized ``uint8`` image; 255 is the best score, invalid placements 0."""
    scores = field.scores
    valid = np.isfinite(scores)
    out = np.zeros(scores.shape, np.uint8)
    if not valid.any():
        return out
    lo, hi = scores[valid].min(), scores[valid].max()
    span = hi - lo
    norm = np.zeros(scores.shape)
    if span > 0:
        norm[valid] = (scores[valid] - lo) / span
        if not field.method.maximize:
            norm[valid] = 1.0 - norm[valid]
    else:
        norm[valid] = 1.0
    out[valid] = np.rint(norm[valid] * 255).astype(np.uint8)
    return out


def hot_lut() -> np.ndarray:
    """256-entry black-red-yellow-white table: R ramps over 0..84, G over 85..169, B over 170..255."""
    i = np.arange(256, dtype=np.float64)
    r = np.clip(i / 85.0, 0, 1)
    g = np.clip((i - 85) / 85.0, 0, 1)
    b = np.clip((i - 170) / 85.0, 0, 1)
    return np.rint(np.stack([r, g, b], axis=1) * 255).astype(np.uint8)


def save_heatmap(field: ScoreField, path: str | os.PathLike, color: bool = False) -> None:
    gray = heatmap(field)
    write_pixmap(path, hot_lut()[gray] if color else gray)
