"""Nucleus segmentation for 27x27 RGB patches.

Stages, in order: contrast adjustment, per-channel color normalization,
blue-ratio binarization with Otsu's threshold, convex hull of the largest
8-connected component, and masking of the original patch.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ArgumentError, NoForeground

PATCH_SIZE = 27

BLUE_LOW_PCT, BLUE_HIGH_PCT = 5.0, 95.0
LIFT_BELOW = 50
LIFT_FLOOR = 30
NORM_MEAN = 128.0
NORM_HALF_WINDOW = 2.5  # sigmas mapped onto half the 0..255 range
# Otsu separability (between-class / total variance) below this is treated as
# texture noise rather than a nucleus. Unimodal noise peaks near 2/pi ~ 0.64.
MIN_SEPARABILITY = 0.75
# smallest 8-connected component accepted as a nucleus; noise specks in
# nucleus-free patches stay well below this
MIN_COMPONENT_PIXELS = 20


@dataclass
class NucleusMask:
    bitmap: np.ndarray  # bool [27, 27]
    hull: np.ndarray  # int [k, 2] (row, col) vertices, counter-clockwise
    centroid: tuple
    component_pixels: int = 0

    @property
    def area(self):
        return int(self.bitmap.sum())


@dataclass
class SegmentedPatch:
    image: np.ndarray  # uint8 [27, 27, 3]
    mask: NucleusMask
    stages: dict = field(default_factory=dict, repr=False)


def as_patch(patch) -> np.ndarray:
    """Validate and return a uint8 ``[27, 27, 3]`` array."""
    a = np.asarray(patch)
    if a.shape != (PATCH_SIZE, PATCH_SIZE, 3):
        raise ArgumentError(f"patch must be 27x27x3, got {a.shape}")
    if a.dtype != np.uint8:
        if np.any(a < 0) or np.any(a > 255) or np.any(a != np.round(a)):
            raise ArgumentError("patch values must be integers in [0, 255]")
        a = a.astype(np.uint8)
    return a


def enhance_contrast(patch):
    """Stretch the blue channel and lift dark red/green values.

    Returns ``(enhanced, degenerate)``; ``degenerate`` is True when the blue
    5th and 95th percentiles coincide, in which case blue is left as is.
    """
    p = as_patch(patch).astype(np.float64)
    out = p.copy()
    blue = p[..., 2]
    lo, hi = np.percentile(blue, [BLUE_LOW_PCT, BLUE_HIGH_PCT])
    degenerate = bool(hi <= lo)
    if not degenerate:
        out[..., 2] = (blue - lo) * (255.0 / (hi - lo))
    rg = p[..., :2]
    out[..., :2] = np.where(rg < LIFT_BELOW, LIFT_FLOOR + rg * ((LIFT_BELOW - LIFT_FLOOR) / LIFT_BELOW), rg)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8), degenerate


def normalize_color(patch):
    """Standardize each channel, then map mean to 128 and +-2.5 sigma onto [0, 255]."""
    p = as_patch(patch).astype(np.float64)
    out = np.empty_like(p)
    scale = NORM_MEAN / NORM_HALF_WINDOW
    for c in range(3):
        ch = p[..., c]
        sd = ch.std()
        if sd == 0:
            out[..., c] = NORM_MEAN
        else:
            out[..., c] = NORM_MEAN + (ch - ch.mean()) / sd * scale
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def blue_ratio(patch):
    p = as_patch(patch).astype(np.float64)
    r, g, b = p[..., 0], p[..., 1], p[..., 2]
    br = (100.0 * b / (1.0 + r + g)) * (256.0 / (1.0 + r + g + b))
    return np.clip(br, 0.0, 255.0)


def otsu_threshold(hist):
    """Otsu's method on a 256-bin histogram.

    Returns ``(threshold, separability)``. The threshold is the cut value
    ``t + 0.5`` between bins ``t`` and ``t + 1`` (first maximizer of the
    between-class variance), so foreground is ``bin > threshold``.
    Separability is the between-class over total variance, in [0, 1].
    """
    h = np.asarray(hist, dtype=np.float64)
    total = h.sum()
    if total <= 0:
        raise ArgumentError("empty histogram")
    prob = h / total
    levels = np.arange(h.size, dtype=np.float64)
    w0 = np.cumsum(prob)[:-1]
    mu_cum = np.cumsum(prob * levels)[:-1]
    mu_t = float(np.sum(prob * levels))
    w1 = 1.0 - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mu_t * w0 - mu_cum) ** 2 / (w0 * w1)
    between = np.where((w0 > 0) & (w1 > 0), between, -1.0)
    t = int(np.argmax(between))
    var_t = float(np.sum(prob * (levels - mu_t) ** 2))
    sep = float(between[t] / var_t) if var_t > 0 and between[t] > 0 else 0.0
    return t + 0.5, sep


def binarize_blue_ratio(patch, min_separability=MIN_SEPARABILITY):
    """Foreground bitmap of pixels whose blue-ratio exceeds Otsu's threshold.

    Raises NoForeground when all pixels share one blue-ratio bin, or when the
    histogram is not bimodal enough to hold a nucleus.
    """
    bins = np.floor(blue_ratio(patch)).astype(np.int64)
    hist = np.bincount(bins.ravel(), minlength=256)
    if np.count_nonzero(hist) < 2:
        raise NoForeground("uniform blue-ratio image")
    thr, sep = otsu_threshold(hist)
    if sep < min_separability:
        raise NoForeground(f"blue-ratio separability {sep:.3f} below {min_separability}")
    return bins > thr


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points):
    """Andrew's monotone chain; counter-clockwise in (row, col) coordinates,
    collinear points dropped."""
    pts = sorted(set(map(tuple, np.asarray(points).tolist())))
    if len(pts) <= 2:
        return np.array(pts, dtype=np.int64).reshape(-1, 2)
    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=np.int64)


def rasterize_hull(hull, shape=(PATCH_SIZE, PATCH_SIZE)):
    """Pixels whose centers lie inside or on the hull polygon."""
    rr, cc = np.mgrid[0:shape[0], 0:shape[1]]
    hull = np.asarray(hull, dtype=np.int64)
    if len(hull) == 1:
        return (rr == hull[0, 0]) & (cc == hull[0, 1])
    inside = np.ones(shape, dtype=bool)
    if len(hull) == 2:
        (r0, c0), (r1, c1) = hull
        cross = (r1 - r0) * (cc - c0) - (c1 - c0) * (rr - r0)
        inside &= cross == 0
        inside &= (rr >= min(r0, r1)) & (rr <= max(r0, r1)) & (cc >= min(c0, c1)) & (cc <= max(c0, c1))
        return inside
    for i in range(len(hull)):
        (r0, c0), (r1, c1) = hull[i], hull[(i + 1) % len(hull)]
        # integer arithmetic makes the boundary test exact
        inside &= (r1 - r0) * (cc - c0) - (c1 - c0) * (rr - r0) >= 0
    return inside


def hull_edges(bitmap):
    """Boundary pixels of a filled region (4-neighbour erosion residue)."""
    b = np.asarray(bitmap, dtype=bool)
    return b & ~ndimage.binary_erosion(b, border_value=0)


def largest_component_hull(bitmap) -> NucleusMask:
    b = np.asarray(bitmap, dtype=bool)
    if not b.any():
        raise NoForeground("empty bitmap")
    labels, n = ndimage.label(b, structure=np.ones((3, 3), dtype=int))
    counts = np.bincount(labels.ravel())[1:]
    # labels follow raster order, so argmax's first-hit rule picks the
    # component containing the lexicographically smallest pixel on ties
    keep = int(np.argmax(counts)) + 1
    pts = np.argwhere(labels == keep)
    hull = convex_hull(pts)
    filled = rasterize_hull(hull, b.shape)
    rows, cols = np.nonzero(filled)
    return NucleusMask(filled, hull, (float(rows.mean()), float(cols.mean())), len(pts))


def apply_mask(patch, mask: NucleusMask) -> SegmentedPatch:
    p = as_patch(patch)
    return SegmentedPatch(p * mask.bitmap[..., None].astype(np.uint8), mask)


def segment(patch, keep_stages=False) -> SegmentedPatch:
    """Full pipeline. Raises NoForeground when no nucleus is found.

    ``keep_stages`` records every intermediate image for ``dump_stages``.
    """
    p = as_patch(patch)
    enhanced, _ = enhance_contrast(p)
    normalized = normalize_color(enhanced)
    binary = binarize_blue_ratio(normalized)
    mask = largest_component_hull(binary)
    if mask.component_pixels < MIN_COMPONENT_PIXELS:
        raise NoForeground(f"largest component has {mask.component_pixels} pixels")
    seg = apply_mask(p, mask)
    if keep_stages:
        seg.stages = {
            "original": p,
            "enhanced": enhanced,
            "normalized": normalized,
            "binary": binary,
            "hull": mask.bitmap,
            "edges": hull_edges(mask.bitmap),
            "segmented": seg.image,
        }
    return seg


def dump_stages(seg: SegmentedPatch, out_dir, prefix="patch"):
    """Write each recorded pipeline stage as a PNG; returns the paths."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, arr in seg.stages.items():
        a = np.asarray(arr)
        if a.dtype == bool:
            a = a.astype(np.uint8) * 255
        path = out / f"{prefix}_{name}.png"
        Image.fromarray(a).save(path)
        paths.append(path)
    return paths
