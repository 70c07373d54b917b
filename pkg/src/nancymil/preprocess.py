"""Slide preprocessing: HSV tissue detection, Otsu thresholding, morphological
cleanup, tile grid planning, and per-tile quality control.

Tissue is detected by Otsu-thresholding the HSV saturation channel (scaled
to 0..255): chromatic tissue separates from the pale background. Sharpness
is the variance of a 3x3 Laplacian of the grayscale tile.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import ndimage

from .core import TileRef
from .errors import DataError


@dataclass(frozen=True)
class TilingProfile:
    name: str
    level: int
    microns_per_pixel: float
    tile_size: int
    overlap: int

    def __post_init__(self):
        if not 0 <= self.overlap < self.tile_size:
            raise DataError(f"profile {self.name}: overlap {self.overlap} "
                            f"must be in [0, {self.tile_size})")

    @property
    def stride(self) -> int:
        return self.tile_size - self.overlap


PROFILES = {
    "T0": TilingProfile("T0", 0, 0.17, 320, 0),
    "T1": TilingProfile("T1", 1, 0.52, 224, 112),
    "T2": TilingProfile("T2", 2, 1.55, 224, 112),
}


@dataclass
class QcThresholds:
    min_tissue: float = 0.25
    min_sharpness: float = 10.0   # Laplacian variance on 0..255 grayscale


class QcReason(str, Enum):
    OK = "ok"
    LOW_TISSUE = "low_tissue"
    BLURRY = "blurry"


@dataclass
class QcRow:
    tile: TileRef
    tissue_fraction: float
    sharpness: float
    accepted: bool
    reason: QcReason


@dataclass
class QcReport:
    rows: list[QcRow] = field(default_factory=list)

    @property
    def n_accepted(self) -> int:
        return sum(r.accepted for r in self.rows)

    def summary(self) -> dict:
        reasons = {}
        for r in self.rows:
            reasons[r.reason.value] = reasons.get(r.reason.value, 0) + 1
        return {"tiles": len(self.rows), "accepted": self.n_accepted,
                "reasons": reasons}


@dataclass
class TissueMask:
    bits: np.ndarray     # (H, W) bool at mask scale
    mask_level: int
    downsample: float    # factor from the source level to the mask

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Hexcone RGB->HSV on 0..255 channels; h in [0, 360), s and v in [0, 1].

    Works elementwise on any (..., 3) array. Achromatic pixels get h = 0,
    s = 0.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.shape[-1] != 3:
        raise DataError(f"expected (..., 3) RGB array, got {rgb.shape}")
    if np.any(rgb < 0) or np.any(rgb > 255):
        raise DataError("RGB channels must lie in [0, 255]")
    r, g, b = rgb[..., 0] / 255.0, rgb[..., 1] / 255.0, rgb[..., 2] / 255.0
    mx = np.maximum(np.maximum(r, g), b)
    mn = np.minimum(np.minimum(r, g), b)
    delta = mx - mn
    chrom = delta > 0
    safe = np.where(chrom, delta, 1.0)
    h = np.zeros_like(mx)
    sel = chrom & (mx == r)
    h = np.where(sel, ((g - b) / safe) % 6.0, h)
    sel = chrom & (mx == g) & (mx != r)
    h = np.where(sel, (b - r) / safe + 2.0, h)
    sel = chrom & (mx == b) & (mx != r) & (mx != g)
    h = np.where(sel, (r - g) / safe + 4.0, h)
    h = (h * 60.0) % 360.0
    s = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([h, s, mx], axis=-1)


def otsu_threshold(histogram: np.ndarray) -> int:
    """Threshold index maximizing between-class variance.

    Class 0 is bins [0..t], class 1 is bins [t+1..255]; lowest maximizer
    wins on ties. If all mass sits in one bin, that bin index is returned.
    """
    hist = np.asarray(histogram, dtype=np.float64)
    if hist.shape != (256,) or np.any(hist < 0):
        raise DataError("histogram must be 256 nonnegative counts")
    total = hist.sum()
    if total <= 0:
        raise DataError("histogram has zero total count")
    nz = np.nonzero(hist)[0]
    if len(nz) == 1:
        return int(nz[0])
    bins = np.arange(256)
    w0 = np.cumsum(hist) / total                 # mass of class 0 at each t
    mu_cum = np.cumsum(hist * bins) / total
    mu_total = mu_cum[-1]
    w1 = 1.0 - w0
    valid = (w0 > 0) & (w1 > 0)
    mu0 = np.where(valid, mu_cum / np.where(w0 > 0, w0, 1.0), 0.0)
    mu1 = np.where(valid, (mu_total - mu_cum) / np.where(w1 > 0, w1, 1.0), 0.0)
    sigma_b = np.where(valid, w0 * w1 * (mu0 - mu1) ** 2, -1.0)
    return int(np.argmax(sigma_b))


def tissue_mask_from_rgb(rgb: np.ndarray, mask_level: int = 0,
                         downsample: float = 1.0) -> TissueMask:
    """Otsu on the saturation channel: tissue = saturation above threshold."""
    hsv = rgb_to_hsv(rgb)
    sat = np.clip(np.round(hsv[..., 1] * 255.0), 0, 255).astype(np.int64)
    hist = np.bincount(sat.ravel(), minlength=256).astype(np.float64)
    thr = otsu_threshold(hist)
    return TissueMask(bits=sat > thr, mask_level=mask_level,
                      downsample=downsample)


def _disc_offsets(radius: int):
    offs = [(dy, dx)
            for dy in range(-radius, radius + 1)
            for dx in range(-radius, radius + 1)
            if dy * dy + dx * dx <= radius * radius]
    return offs


def _shift(mask: np.ndarray, dy: int, dx: int, fill: bool) -> np.ndarray:
    out = np.full_like(mask, fill)
    h, w = mask.shape
    ys = slice(max(dy, 0), min(h + dy, h))
    xs = slice(max(dx, 0), min(w + dx, w))
    ys_src = slice(max(-dy, 0), min(h - dy, h))
    xs_src = slice(max(-dx, 0), min(w - dx, w))
    out[ys, xs] = mask[ys_src, xs_src]
    return out


def binary_dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Dilation by a disc; pixels outside the image count as background."""
    out = np.zeros_like(mask)
    for dy, dx in _disc_offsets(radius):
        out |= _shift(mask, dy, dx, fill=False)
    return out


def binary_erode(mask: np.ndarray, radius: int) -> np.ndarray:
    out = np.ones_like(mask)
    for dy, dx in _disc_offsets(radius):
        out &= _shift(mask, dy, dx, fill=False)
    return out


def remove_small_components(mask: np.ndarray, min_area: int) -> np.ndarray:
    if min_area <= 1:
        return mask.copy()
    labels, n = ndimage.label(mask)
    if n == 0:
        return mask.copy()
    areas = np.bincount(labels.ravel())
    keep = areas >= min_area
    keep[0] = False
    return keep[labels]


def morph_cleanup(mask: TissueMask, radius: int = 2,
                  min_area: int = 64) -> TissueMask:
    """Closing then opening with a disc element, then drop tiny components."""
    if radius < 0:
        raise DataError("radius must be nonnegative")
    bits = mask.bits
    if radius > 0:
        bits = binary_erode(binary_dilate(bits, radius), radius)   # closing
        bits = binary_dilate(binary_erode(bits, radius), radius)   # opening
    bits = remove_small_components(bits, min_area)
    return TissueMask(bits=bits, mask_level=mask.mask_level,
                      downsample=mask.downsample)


def plan_tiles(slide_id: str, slide_width: int, slide_height: int,
               profile: TilingProfile) -> list[TileRef]:
    """Row-major grid of fully-inside tiles; partial border strips dropped."""
    if slide_width <= 0 or slide_height <= 0:
        raise DataError(f"slide dimensions must be positive: "
                        f"{slide_width}x{slide_height}")
    ts, stride = profile.tile_size, profile.stride
    if slide_width < ts or slide_height < ts:
        return []
    nx = (slide_width - ts) // stride + 1
    ny = (slide_height - ts) // stride + 1
    return [TileRef(slide_id=slide_id, level=profile.level,
                    x=ix * stride, y=iy * stride, width=ts, height=ts,
                    microns_per_pixel=profile.microns_per_pixel)
            for iy in range(ny) for ix in range(nx)]


def laplacian_variance(gray: np.ndarray) -> float:
    """Variance of the 3x3 Laplacian [[0,1,0],[1,-4,1],[0,1,0]], interior
    pixels only. Zero for tiles smaller than 3x3."""
    g = np.asarray(gray, dtype=np.float64)
    if g.ndim != 2:
        raise DataError(f"expected a 2-D grayscale tile, got {g.shape}")
    if g.shape[0] < 3 or g.shape[1] < 3:
        return 0.0
    lap = (g[:-2, 1:-1] + g[2:, 1:-1] + g[1:-1, :-2] + g[1:-1, 2:]
           - 4.0 * g[1:-1, 1:-1])
    return float(lap.var())


def qc_filter(tile_gray: np.ndarray, mask_region: np.ndarray, tile: TileRef,
              thresholds: QcThresholds | None = None) -> QcRow:
    """Accept a tile iff it has enough tissue and enough sharpness.

    Low tissue is checked first, so an off-tissue blurry tile reports
    low_tissue.
    """
    thresholds = thresholds or QcThresholds()
    mask_region = np.asarray(mask_region, dtype=bool)
    tissue = float(mask_region.mean()) if mask_region.size else 0.0
    sharp = laplacian_variance(tile_gray)
    if tissue < thresholds.min_tissue:
        return QcRow(tile, tissue, sharp, False, QcReason.LOW_TISSUE)
    if sharp < thresholds.min_sharpness:
        return QcRow(tile, tissue, sharp, False, QcReason.BLURRY)
    return QcRow(tile, tissue, sharp, True, QcReason.OK)
