"""Grayscale enhancement: decision-based median filtering followed by CLAHE.

All operations are pure functions on 2-D integer arrays (row-major, values in
``[0, levels-1]``). The enhancement order is fixed: median filter first, then
contrast-limited adaptive histogram equalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_LEVELS = 256

_BORDERS = ("replicate", "reflect")
_MODES = ("classic", "decision")

# np.pad modes implementing the two border policies
_PAD_MODE = {"replicate": "edge", "reflect": "symmetric"}


@dataclass(frozen=True)
class MedianParams:
    """Median filter configuration; window is (2r+1) x (2r+1)."""

    radius: int = 1
    border: str = "replicate"
    mode: str = "classic"
    decision_threshold: int = 0

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError(f"radius must be >= 0, got {self.radius}")
        if self.border not in _BORDERS:
            raise ValueError(f"border must be one of {_BORDERS}, got {self.border!r}")
        if self.mode not in _MODES:
            raise ValueError(f"mode must be one of {_MODES}, got {self.mode!r}")
        if self.decision_threshold < 0:
            raise ValueError("decision_threshold must be >= 0")


@dataclass(frozen=True)
class ClaheParams:
    """CLAHE configuration.

    ``clip_limit`` is relative: the absolute per-bin cap is
    ``max(1, floor(clip_limit * mean_bin_count))``. Values >= 1 clip; a very
    large value disables clipping entirely.
    """

    tiles_x: int = 8
    tiles_y: int = 8
    clip_limit: float = 2.0
    bins: int = DEFAULT_LEVELS

    def __post_init__(self):
        if self.tiles_x < 1 or self.tiles_y < 1:
            raise ValueError("tile grid dimensions must be >= 1")
        if not self.clip_limit > 0:
            raise ValueError("clip_limit must be > 0")
        if self.bins < 2:
            raise ValueError("bins must be >= 2")


def validate_image(img: np.ndarray, levels: int = DEFAULT_LEVELS) -> np.ndarray:
    """Check a grayscale image: 2-D, integer, values in [0, levels-1]."""
    a = np.asarray(img)
    if a.ndim != 2 or a.size == 0:
        raise ValueError(f"expected non-empty 2-D image, got shape {a.shape}")
    if not np.issubdtype(a.dtype, np.integer):
        raise ValueError(f"expected integer pixels, got dtype {a.dtype}")
    if a.min() < 0 or a.max() >= levels:
        raise ValueError(f"pixel values must lie in [0, {levels - 1}]")
    return a


def median_filter(img: np.ndarray, p: MedianParams) -> np.ndarray:
    """Apply a (2r+1)x(2r+1) median filter.

    classic mode replaces every pixel by its window median. decision mode
    treats a pixel as impulse noise only when it deviates from the window
    median by more than ``decision_threshold`` and leaves it untouched
    otherwise.
    """
    img = validate_image(img)
    r = p.radius
    if r == 0:
        return img.copy()
    padded = np.pad(img, r, mode=_PAD_MODE[p.border])
    win = np.lib.stride_tricks.sliding_window_view(padded, (2 * r + 1, 2 * r + 1))
    flat = win.reshape(img.shape[0], img.shape[1], -1)
    mid = flat.shape[-1] // 2
    med = np.partition(flat, mid, axis=-1)[..., mid]
    if p.mode == "classic":
        return med.astype(img.dtype)
    delta = np.abs(img.astype(np.int64) - med.astype(np.int64))
    return np.where(delta > p.decision_threshold, med, img).astype(img.dtype)


def clip_redistribute(counts: np.ndarray, clip_limit: float) -> np.ndarray:
    """Clip a histogram at ``max(1, floor(clip_limit * mean))`` and push the
    excess back uniformly.

    Excess mass is handed out one unit per below-limit bin, in index order,
    pass after pass, until it is exhausted or every bin sits at the limit.
    Whatever then remains is spread evenly (first bins get the remainder),
    so for clip_limit >= 1 no bin ends more than one above the limit. Total
    mass is preserved exactly.
    """
    h = np.asarray(counts, dtype=np.int64)
    if h.ndim != 1 or h.size == 0:
        raise ValueError("histogram must be a non-empty 1-D array")
    if (h < 0).any():
        raise ValueError("histogram counts must be non-negative")
    if not clip_limit > 0:
        raise ValueError("clip_limit must be > 0")
    n_bins = h.size
    limit = max(1, int(clip_limit * h.sum() / n_bins))
    excess = int(np.maximum(h - limit, 0).sum())
    if excess == 0:
        return h.copy()
    h = np.minimum(h, limit)
    # Round-robin fill toward the limit; eligibility is frozen per pass, which
    # matches the one-unit-at-a-time order because a bin gains at most one
    # unit per pass.
    while excess > 0:
        below = np.flatnonzero(h < limit)
        if below.size == 0:
            break
        take = below[: min(excess, below.size)]
        h[take] += 1
        excess -= take.size
    if excess > 0:
        base, rem = divmod(excess, n_bins)
        h += base
        h[:rem] += 1
    return h


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5).astype(np.int64)


def _tile_lut(tile: np.ndarray, p: ClaheParams, levels: int) -> np.ndarray:
    """Equalization lookup table for one tile (length ``levels``)."""
    identity = np.arange(levels, dtype=np.int64)
    if tile.min() == tile.max():
        # Single gray level: degenerate CDF, keep constant regions constant.
        return identity
    bin_of = (identity * p.bins) // levels
    hist = np.bincount(bin_of[tile.ravel()], minlength=p.bins)
    hist = clip_redistribute(hist, p.clip_limit)
    cdf = np.cumsum(hist)
    n = int(cdf[-1])
    cdf_min = int(cdf[np.argmax(cdf > 0)])
    if n == cdf_min:
        return identity
    lut = _round_half_up((cdf[bin_of] - cdf_min) / (n - cdf_min) * (levels - 1))
    return np.clip(lut, 0, levels - 1)


def _tile_edges(size: int, tiles: int) -> np.ndarray:
    """Tile boundaries along one axis; the last tile absorbs the remainder."""
    base = size // tiles
    edges = np.arange(tiles + 1, dtype=np.int64) * base
    edges[-1] = size
    return edges


def _interp_coords(size: int, edges: np.ndarray):
    """Per-pixel neighbor tile indices and interpolation weights along an axis."""
    centers = (edges[:-1] + edges[1:] - 1) / 2.0
    coords = np.arange(size, dtype=np.float64)
    lo = np.clip(np.searchsorted(centers, coords, side="right") - 1, 0, len(centers) - 1)
    hi = np.minimum(lo + 1, len(centers) - 1)
    span = centers[hi] - centers[lo]
    with np.errstate(invalid="ignore", divide="ignore"):
        w = np.where(span > 0, (coords - centers[lo]) / np.where(span > 0, span, 1.0), 0.0)
    return lo, hi, np.clip(w, 0.0, 1.0)


def clahe(img: np.ndarray, p: ClaheParams, levels: int = DEFAULT_LEVELS) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization.

    The image is split into a tiles_y x tiles_x grid (floor-division sizing,
    remainders absorbed by the last row/column). Each tile gets a clipped,
    equalized lookup table; every output pixel bilinearly interpolates the
    mappings of its (up to) four nearest tile centers.
    """
    img = validate_image(img, levels)
    h, w = img.shape
    if h < p.tiles_y or w < p.tiles_x:
        raise ValueError(
            f"image {h}x{w} smaller than tile grid {p.tiles_y}x{p.tiles_x}"
        )
    ye = _tile_edges(h, p.tiles_y)
    xe = _tile_edges(w, p.tiles_x)
    luts = np.empty((p.tiles_y, p.tiles_x, levels), dtype=np.int64)
    for ty in range(p.tiles_y):
        for tx in range(p.tiles_x):
            tile = img[ye[ty]:ye[ty + 1], xe[tx]:xe[tx + 1]]
            luts[ty, tx] = _tile_lut(tile, p, levels)

    ylo, yhi, wy = _interp_coords(h, ye)
    xlo, xhi, wx = _interp_coords(w, xe)
    ylo_c, yhi_c = ylo[:, None], yhi[:, None]
    xlo_c, xhi_c = xlo[None, :], xhi[None, :]
    tl = luts[ylo_c, xlo_c, img].astype(np.float64)
    tr = luts[ylo_c, xhi_c, img].astype(np.float64)
    bl = luts[yhi_c, xlo_c, img].astype(np.float64)
    br = luts[yhi_c, xhi_c, img].astype(np.float64)
    # "a + w*(b-a)" keeps the result exact when the neighboring mappings agree
    # (single-tile grids, image borders).
    top = tl + wx[None, :] * (tr - tl)
    bot = bl + wx[None, :] * (br - bl)
    out = _round_half_up(top + wy[:, None] * (bot - top))
    return np.clip(out, 0, levels - 1).astype(img.dtype)


def preprocess(
    img: np.ndarray,
    mp: MedianParams,
    cp: ClaheParams,
    levels: int = DEFAULT_LEVELS,
) -> np.ndarray:
    """Median filter then CLAHE, in that fixed order."""
    return clahe(median_filter(img, mp), cp, levels)
