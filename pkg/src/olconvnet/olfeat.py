"""The nine object-level nucleus features: blue mode, four GLCM statistics,
and four shape descriptors."""
from __future__ import annotations

from dataclasses import astuple, dataclass, fields

import numpy as np

from .errors import NoForeground, NoTexture
from .segmenter import NucleusMask, SegmentedPatch, segment

GLCM_LEVELS = 8
# (drow, dcol) for 0, 45, 90 and 135 degrees at distance 1
GLCM_OFFSETS = ((0, 1), (-1, 1), (-1, 0), (-1, -1))


@dataclass
class OlFeatureVector:
    mode_blue: int = 0
    glcm_contrast: float = 0.0
    glcm_homogeneity: float = 0.0
    glcm_correlation: float = 0.0
    glcm_energy: float = 0.0
    area_px: int = 0
    major_axis_px: float = 0.0
    minor_axis_px: float = 0.0
    eccentricity: float = 0.0
    degenerate: bool = False

    @classmethod
    def names(cls):
        return [f.name for f in fields(cls) if f.name != "degenerate"]

    def as_array(self):
        return np.array(astuple(self)[:9], dtype=np.float64)


FEATURE_NAMES = OlFeatureVector.names()
N_OL_FEATURES = len(FEATURE_NAMES)


def mode_intensity(seg: SegmentedPatch) -> int:
    """Most frequent blue value inside the mask; ties go to the smallest value."""
    blue = seg.image[..., 2][seg.mask.bitmap]
    return int(np.argmax(np.bincount(blue, minlength=256)))


def gray_levels(image, levels=GLCM_LEVELS):
    rgb = np.asarray(image, dtype=np.float64)
    gray = np.floor(0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2] + 0.5)
    gray = np.clip(gray, 0, 255).astype(np.int64)
    return gray * levels // 256


def glcm_matrices(q, mask, levels=GLCM_LEVELS):
    """Symmetric, normalized co-occurrence matrix per offset; None where no
    pair has both pixels inside the mask."""
    h, w = q.shape
    out = []
    for dr, dc in GLCM_OFFSETS:
        r0, r1 = max(0, -dr), h - max(0, dr)
        c0, c1 = max(0, -dc), w - max(0, dc)
        a, b = q[r0:r1, c0:c1], q[r0 + dr:r1 + dr, c0 + dc:c1 + dc]
        ok = mask[r0:r1, c0:c1] & mask[r0 + dr:r1 + dr, c0 + dc:c1 + dc]
        if not ok.any():
            out.append(None)
            continue
        counts = np.bincount(a[ok] * levels + b[ok], minlength=levels * levels).reshape(levels, levels)
        counts = counts + counts.T
        out.append(counts / counts.sum())
    return out


def haralick(p):
    """(contrast, homogeneity, correlation, energy) of one normalized GLCM."""
    n = p.shape[0]
    i, j = np.mgrid[0:n, 0:n].astype(np.float64)
    contrast = float(np.sum(p * (i - j) ** 2))
    homogeneity = float(np.sum(p / (1.0 + np.abs(i - j))))
    energy = float(np.sum(p * p))
    mu_i, mu_j = float(np.sum(i * p)), float(np.sum(j * p))
    sd_i = np.sqrt(float(np.sum(p * (i - mu_i) ** 2)))
    sd_j = np.sqrt(float(np.sum(p * (j - mu_j) ** 2)))
    if sd_i * sd_j < 1e-12:
        correlation = 1.0
    else:
        correlation = float(np.sum(p * (i - mu_i) * (j - mu_j)) / (sd_i * sd_j))
        correlation = min(1.0, max(-1.0, correlation))
    return contrast, homogeneity, correlation, energy


def glcm_features(seg: SegmentedPatch):
    """Haralick statistics of the masked nucleus averaged over four directions."""
    q = gray_levels(seg.image)
    mats = [m for m in glcm_matrices(q, np.asarray(seg.mask.bitmap, dtype=bool)) if m is not None]
    if not mats:
        raise NoTexture("no pixel pair inside the mask")
    stats = np.array([haralick(m) for m in mats])
    return tuple(float(v) for v in stats.mean(axis=0))


def shape_features(mask: NucleusMask):
    """(area, major axis, minor axis, eccentricity) from second central moments."""
    coords = np.argwhere(np.asarray(mask.bitmap, dtype=bool)).astype(np.float64)
    area = len(coords)
    if area == 0:
        raise NoForeground("empty mask")
    d = coords - coords.mean(axis=0)
    cov = d.T @ d / area
    lam = np.sort(np.linalg.eigvalsh(cov))[::-1]
    l1, l2 = max(float(lam[0]), 0.0), max(float(lam[1]), 0.0)
    major, minor = 4.0 * np.sqrt(l1), 4.0 * np.sqrt(l2)
    ecc = float(np.sqrt(max(0.0, 1.0 - l2 / l1))) if l1 > 0 else 0.0
    return area, float(major), float(minor), ecc


def ol_from_segmented(seg: SegmentedPatch) -> OlFeatureVector:
    contrast, homogeneity, correlation, energy = glcm_features(seg)
    area, major, minor, ecc = shape_features(seg.mask)
    return OlFeatureVector(
        mode_intensity(seg), contrast, homogeneity, correlation, energy, area, major, minor, ecc
    )


def extract_ol(patch) -> OlFeatureVector:
    """Segment and describe one patch.

    A failed segmentation yields the all-zero vector with ``degenerate`` set;
    the zero vector then acts as the "no nucleus here" signal downstream.
    """
    try:
        return ol_from_segmented(segment(patch))
    except (NoForeground, NoTexture):
        return OlFeatureVector(degenerate=True)


def extract_ol_batch(patches):
    """Return ``(features [n, 9], degenerate [n])``."""
    vecs = [extract_ol(p) for p in patches]
    feats = np.array([v.as_array() for v in vecs]).reshape(len(vecs), N_OL_FEATURES)
    return feats, np.array([v.degenerate for v in vecs], dtype=bool)
