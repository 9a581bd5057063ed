"""Classical retinal vessel segmentation.

Pipeline: green channel -> invert -> CLAHE -> dark-structure (black-hat)
response -> Otsu threshold inside the field of view -> small-component
removal. Vessels are dark in the fundus green channel; contrast enhancement
runs on the inverted (bright-vessel) image and the black-hat operator is then
applied in dark-vessel polarity, which is the same enhancement expressed
either way by min/max duality.

Gray images are uint8 arrays in [0, 255]; masks are uint8 {0, 1}.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


class ImageSmallerThanTileGrid(ValueError):
    pass


class DegenerateHistogram(ValueError):
    """All in-domain pixels share one value; no threshold exists."""


@dataclass(frozen=True)
class SegParams:
    """Segmentation parameters, quoted at a 224-px reference scale.

    ``se_radius`` and ``min_component_px`` are scaled to the actual image
    size (radius linearly, component area quadratically).
    """

    clahe_tiles: tuple[int, int] = (8, 8)
    clahe_clip: float = 2.0
    se_radius: int = 7
    min_component_px: int = 30
    fov_margin_px: int = 3
    reference_size: int = 224

    def __post_init__(self):
        if self.clahe_tiles[0] < 1 or self.clahe_tiles[1] < 1:
            raise ValueError("tile grid must be >= 1x1")
        if self.clahe_clip <= 0 or self.se_radius < 1 or self.min_component_px < 0:
            raise ValueError("seg parameters must be positive")


def _check_gray(gray: np.ndarray) -> np.ndarray:
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise ValueError("expected 2-D gray image")
    if gray.dtype != np.uint8:
        if np.any(gray < 0) or np.any(gray > 255):
            raise ValueError("gray values must lie in [0, 255]")
        gray = gray.astype(np.uint8)
    return gray


# ---------------------------------------------------------------------------
# CLAHE


def _tile_lut(tile: np.ndarray, clip: float) -> np.ndarray:
    hist = np.bincount(tile.ravel(), minlength=256).astype(np.float64)
    n = tile.size
    nonzero = np.flatnonzero(hist)
    if nonzero.size == 1:
        # flat tile: equalization is ill-posed, map the value to itself
        return np.arange(256, dtype=np.float64)
    if np.isfinite(clip):
        limit = clip * n / 256.0
        clipped = np.minimum(hist, limit)
        excess = n - clipped.sum()
        clipped += excess / 256.0
    else:
        clipped = hist
    cdf = np.cumsum(clipped) / n
    return np.rint(255.0 * cdf)


def clahe(gray: np.ndarray, tiles: tuple[int, int] = (8, 8), clip: float = 2.0) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization.

    Each tile's 256-bin histogram is clipped at ``clip * tile_pixels / 256``
    with the excess spread uniformly over all bins, then turned into an
    equalization LUT; each pixel blends the LUTs of its four neighbouring
    tile centers bilinearly. ``tiles=(1, 1)`` with ``clip=inf`` reduces to
    classical global histogram equalization.
    """
    gray = _check_gray(gray)
    ty, tx = tiles
    h, w = gray.shape
    if h < ty or w < tx:
        raise ImageSmallerThanTileGrid(f"{h}x{w} image cannot host a {ty}x{tx} tile grid")

    row_edges = np.linspace(0, h, ty + 1).astype(np.int64)
    col_edges = np.linspace(0, w, tx + 1).astype(np.int64)
    luts = np.empty((ty, tx, 256))
    for i in range(ty):
        for j in range(tx):
            tile = gray[row_edges[i]:row_edges[i + 1], col_edges[j]:col_edges[j + 1]]
            luts[i, j] = _tile_lut(tile, clip)

    def axis_blend(coords, edges, n_tiles):
        centers = (edges[:-1] + edges[1:] - 1) / 2.0
        lo = np.clip(np.searchsorted(centers, coords, side="right") - 1, 0, n_tiles - 1)
        hi = np.clip(lo + 1, 0, n_tiles - 1)
        span = np.where(hi > lo, centers[hi] - centers[lo], 1.0)
        frac = np.clip((coords - centers[lo]) / span, 0.0, 1.0)
        return lo, hi, frac

    r0, r1, fy = axis_blend(np.arange(h, dtype=np.float64), row_edges, ty)
    c0, c1, fx = axis_blend(np.arange(w, dtype=np.float64), col_edges, tx)
    fy = fy[:, None]
    fx = fx[None, :]
    out = ((1 - fy) * (1 - fx) * luts[r0[:, None], c0[None, :], gray]
           + (1 - fy) * fx * luts[r0[:, None], c1[None, :], gray]
           + fy * (1 - fx) * luts[r1[:, None], c0[None, :], gray]
           + fy * fx * luts[r1[:, None], c1[None, :], gray])
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# morphology


def disk_footprint(radius: int) -> np.ndarray:
    if radius < 1:
        raise ValueError("structuring element radius must be >= 1")
    coords = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(coords, coords, indexing="ij")
    return (dy * dy + dx * dx) <= radius * radius


def morph(gray: np.ndarray, op: str, se_radius: int) -> np.ndarray:
    """Grayscale morphology with a disk structuring element.

    Padding keeps the operators dual: dilation pads 0, erosion pads 255, so
    erode(x) == 255 - dilate(255 - x) exactly.
    """
    gray = _check_gray(gray)
    fp = disk_footprint(se_radius)

    def dilate(a):
        return ndimage.maximum_filter(a, footprint=fp, mode="constant", cval=0)

    def erode(a):
        return ndimage.minimum_filter(a, footprint=fp, mode="constant", cval=255)

    if op == "dilate":
        return dilate(gray)
    if op == "erode":
        return erode(gray)
    if op == "open":
        return dilate(erode(gray))
    if op == "close":
        return erode(dilate(gray))
    if op == "blackhat":
        return erode(dilate(gray)) - gray  # close >= img, safe in uint8
    raise ValueError(f"unknown morphology op {op!r}")


def dilate_mask(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius < 1:
        return np.asarray(mask, dtype=np.uint8).copy()
    fp = disk_footprint(radius)
    return ndimage.maximum_filter(np.asarray(mask, dtype=np.uint8), footprint=fp,
                                  mode="constant", cval=0)


# ---------------------------------------------------------------------------
# Otsu


def otsu_threshold(gray: np.ndarray, domain: np.ndarray | None = None) -> int:
    """Smallest threshold maximizing between-class variance.

    The objective w0*w1*(mu0 - mu1)^2 is compared in exact integer
    arithmetic (cross-multiplied rationals), so the smallest-t convention is
    unaffected by float rounding. Classes split as {v <= t} vs {v > t}.
    """
    gray = _check_gray(gray)
    values = gray if domain is None else gray[np.asarray(domain).astype(bool)]
    if values.size == 0:
        raise DegenerateHistogram("empty domain")
    hist = np.bincount(values.ravel(), minlength=256).astype(np.int64)
    if np.count_nonzero(hist) < 2:
        raise DegenerateHistogram("single gray level in domain")

    total = int(hist.sum())
    total_s = int(np.arange(256, dtype=np.int64) @ hist)
    best_t = -1
    best_num = 0  # (s0*c1 - s1*c0)^2 as python int
    best_den = 1  # c0*c1
    c0 = 0
    s0 = 0
    for t in range(256):
        c0 += int(hist[t])
        s0 += t * int(hist[t])
        c1 = total - c0
        if c0 == 0 or c1 == 0:
            continue
        num = (s0 * c1 - (total_s - s0) * c0) ** 2
        den = c0 * c1
        if best_t < 0 or num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return best_t


# ---------------------------------------------------------------------------
# field of view and the full pipeline


def estimate_fov(img: np.ndarray):
    """Estimate the circular field of view of a fundus frame.

    Returns ``(mask, (cy, cx), radius)``: the circle centered on the frame
    covering every pixel brighter than 10% of the image maximum.
    """
    arr = np.asarray(img, dtype=np.float64)
    gray = arr.mean(axis=2) if arr.ndim == 3 else arr
    h, w = gray.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.mgrid[0:h, 0:w]
    dist = np.sqrt((ys - cy) ** 2 + (xs - cx) ** 2)
    bright = gray > 0.1 * gray.max()
    radius = float(dist[bright].max()) if bright.any() else float(dist.max())
    return (dist <= radius).astype(np.uint8), (cy, cx), radius


def remove_small_components(mask: np.ndarray, min_px: int) -> np.ndarray:
    """Drop 8-connected foreground components smaller than ``min_px``."""
    mask = (np.asarray(mask) > 0).astype(np.uint8)
    if min_px <= 1:
        return mask
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=np.int8))
    if n == 0:
        return mask
    sizes = np.bincount(labels.ravel())
    keep = sizes >= min_px
    keep[0] = False
    return keep[labels].astype(np.uint8)


def segment_vessels(img: np.ndarray, params: SegParams = SegParams()) -> np.ndarray:
    """Binary vessel mask from an RGB fundus raster."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("expected (H, W, 3) RGB image")
    h, w = img.shape[:2]
    scale = min(h, w) / params.reference_size
    radius = max(1, int(round(params.se_radius * scale)))
    min_px = max(1, int(round(params.min_component_px * scale * scale)))

    green = img[:, :, 1]
    enhanced = clahe(255 - green, params.clahe_tiles, params.clahe_clip)
    response = morph(255 - enhanced, "blackhat", radius)

    fov, (cy, cx), fov_radius = estimate_fov(img)
    if params.fov_margin_px > 0:
        ys, xs = np.mgrid[0:h, 0:w]
        dist = np.sqrt((ys - cy) ** 2 + (xs - cx) ** 2)
        domain = dist <= fov_radius - params.fov_margin_px
    else:
        domain = fov.astype(bool)

    try:
        t = otsu_threshold(response, domain)
    except DegenerateHistogram:
        return np.zeros((h, w), dtype=np.uint8)
    mask = ((response > t) & domain).astype(np.uint8)
    return remove_small_components(mask, min_px)
