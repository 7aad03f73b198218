"""Synthetic H&E-like nucleus patches with known ground-truth masks.

Class 1 (epithelial): large, nearly round blue ellipse.
Class 2 (fibroblast): thin elongated spindle at a random angle.
Class 3 (inflammatory): small dark-blue disk.
Class 4 (miscellaneous): faint irregular low-blue blob, or no nucleus at all.

Each patch is a 27x27 image whose nucleus sits near the centre, so a
ground-truth row ``(image_id, 13, 13, class)`` ingests it exactly.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ArgumentError, IngestError

SIZE = 27
CENTER = SIZE // 2
SUPERSAMPLE = 4

# stained nuclei are bright blue: higher blue than the pink stroma
BACKGROUND_RGB = np.array([226.0, 152.0, 168.0])
NUCLEUS_RGB = {
    1: np.array([95.0, 80.0, 215.0]),
    2: np.array([88.0, 72.0, 210.0]),
    3: np.array([55.0, 45.0, 200.0]),
    4: np.array([165.0, 125.0, 195.0]),
}
EMPTY_FRACTION = 0.5  # share of class-4 patches without any blob


@dataclass
class SynthSample:
    sample_id: str
    label: int
    patch: np.ndarray
    true_mask: np.ndarray
    params: dict


def _ellipse_coverage(cy, cx, a, b, theta, ss=SUPERSAMPLE):
    """Fractional pixel coverage of an ellipse (semi-axes a >= b, angle theta)
    plus the hard mask of pixel centres inside it."""
    off = (np.arange(ss) + 0.5) / ss - 0.5
    r = (np.arange(SIZE)[:, None] + off[None, :]).ravel()
    rr, cc = np.meshgrid(r, r, indexing="ij")

    def inside(yy, xx):
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0

    cover = inside(rr, cc).reshape(SIZE, ss, SIZE, ss).mean(axis=(1, 3))
    pr, pc = np.mgrid[0:SIZE, 0:SIZE]
    return cover, inside(pr.astype(float), pc.astype(float))


def _background(rng):
    noise = rng.standard_normal((SIZE, SIZE, 3))
    noise = ndimage.gaussian_filter(noise, sigma=(1.0, 1.0, 0)) * 2.2
    shade = rng.normal(0, 6, size=3)
    return BACKGROUND_RGB + shade + noise * 6.0


def _render(rng, label):
    bg = _background(rng)
    params = {}
    cy = CENTER + rng.uniform(-1.5, 1.5)
    cx = CENTER + rng.uniform(-1.5, 1.5)
    theta = rng.uniform(0, np.pi)
    if label == 1:
        a = rng.uniform(8, 11)
        b = a * rng.uniform(0.85, 1.0)
    elif label == 2:
        a = rng.uniform(10, 13)
        b = rng.uniform(2, 4)
    elif label == 3:
        a = b = rng.uniform(3, 5)
    else:
        a = b = 0.0
    if label in (1, 2, 3):
        cover, mask = _ellipse_coverage(cy, cx, a, b, theta)
        strength = 1.0
        params.update(a=a, b=b, theta=theta, cy=cy, cx=cx)
    elif rng.uniform() < EMPTY_FRACTION:
        cover = np.zeros((SIZE, SIZE))
        mask = np.zeros((SIZE, SIZE), dtype=bool)
        strength = 0.0
        params["empty"] = 1
    else:
        cover = np.zeros((SIZE, SIZE))
        mask = np.zeros((SIZE, SIZE), dtype=bool)
        for _ in range(int(rng.integers(2, 4))):
            c, m = _ellipse_coverage(
                cy + rng.uniform(-3, 3), cx + rng.uniform(-3, 3),
                rng.uniform(3, 7), rng.uniform(2, 4), rng.uniform(0, np.pi),
            )
            cover = np.maximum(cover, c)
            mask |= m
        strength = rng.uniform(0.35, 0.55)
        params.update(empty=0, strength=strength)
    nucleus = NUCLEUS_RGB[label] + rng.normal(0, 8, size=3)
    texture = rng.normal(0, 9.0, size=(SIZE, SIZE, 1)) * np.array([1.0, 1.0, 0.6])
    alpha = (cover * strength)[..., None]
    img = bg * (1 - alpha) + (nucleus + texture) * alpha
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), mask, params


def synth_patches(n_per_class: int, seed: int):
    """Generate ``4 * n_per_class`` samples in memory, classes interleaved."""
    if n_per_class < 1:
        raise ArgumentError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_per_class):
        for label in (1, 2, 3, 4):
            patch, mask, params = _render(rng, label)
            out.append(SynthSample(f"syn{label}_{i:05d}", label, patch, mask, params))
    return out


def encode_mask(mask) -> str:
    return np.packbits(np.asarray(mask, dtype=bool).ravel()).tobytes().hex()


def decode_mask(text: str) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(bytes.fromhex(text), dtype=np.uint8))
    return bits[: SIZE * SIZE].reshape(SIZE, SIZE).astype(bool)


def synth_generate(n_per_class: int, seed: int, out_dir):
    """Write PNG patches, ``groundtruth.csv`` and ``synth.manifest``.

    The manifest is ``key=value`` header lines, a ``[samples]`` marker, then
    ``sample_id,label,true_area,true_mask_hex`` rows.
    """
    from PIL import Image

    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IngestError(f"cannot create {out}: {exc}") from exc
    samples = synth_patches(n_per_class, seed)
    try:
        with open(out / "groundtruth.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image_id", "x", "y", "class_id"])
            for s in samples:
                Image.fromarray(s.patch).save(out / "images" / f"{s.sample_id}.png")
                w.writerow([s.sample_id, CENTER, CENTER, s.label])
        with open(out / "synth.manifest", "w") as fh:
            fh.write("format=olconvnet-synth/1\n")
            fh.write(f"seed={seed}\nn_per_class={n_per_class}\nn_samples={len(samples)}\n")
            fh.write("[samples]\nsample_id,label,true_area,true_mask_hex\n")
            for s in samples:
                fh.write(f"{s.sample_id},{s.label},{int(s.true_mask.sum())},{encode_mask(s.true_mask)}\n")
    except OSError as exc:
        raise IngestError(f"cannot write synthetic dataset to {out}: {exc}") from exc
    return samples


def read_synth_manifest(path):
    """Return ``{sample_id: (label, true_mask)}`` from a generator manifest."""
    masks = {}
    with open(path) as fh:
        lines = fh.read().splitlines()
    start = lines.index("[samples]") + 2
    for line in lines[start:]:
        if not line:
            continue
        sid, label, _, hexmask = line.split(",")
        masks[sid] = (int(label), decode_mask(hexmask))
    return masks
