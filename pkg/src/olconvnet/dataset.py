"""Labeled 27x27 nucleus patches: ingestion, splitting, normalization and
the on-disk formats.

Ground-truth CSV
    Header ``image_id,x,y,class_id``. ``x`` is the 0-based column and ``y``
    the 0-based row of the nucleus centre; ``class_id`` is 1..4 (epithelial,
    fibroblast, inflammatory, miscellaneous). Images are ``<image_id>.png``.

Manifest (``dataset.manifest``)
    ``key=value`` header lines, then a line ``[samples]``, a CSV header
    ``sample_id,label,synthetic,split,degenerate`` and one row per sample.
    Header keys: ``format`` (``olconvnet-manifest/1``), ``n_samples``,
    ``class_counts`` (``label:count`` joined by ``;``), ``mean_image``
    (2187 comma-separated floats in ``[row, col, channel]`` order, or
    ``none``), ``patches`` (file name of the ``uint8 [n, 27, 27, 3]`` npy
    array) and any number of ``provenance.<name>`` entries. Lines starting
    with ``#`` are comments.

Feature CSV
    Header ``sample_id,label,`` followed by the nine object-level feature names.

CNN-feature binary
    Magic ``OLCV``, then little-endian u32 version (1), n_samples, dim, then
    ``n_samples * dim`` float32 values, row-major.
"""
from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .adasyn import BalanceConfig, balance
from .errors import FormatError, IngestError, ParseError, SplitError, StateError
from .olfeat import FEATURE_NAMES

log = logging.getLogger(__name__)

PATCH = 27
HALF = PATCH // 2
CLASS_NAMES = {1: "epithelial", 2: "fibroblast", 3: "inflammatory", 4: "miscellaneous"}
SPLITS = ("train", "val", "test", "fold1", "fold2", "unassigned")
MANIFEST_FORMAT = "olconvnet-manifest/1"


@dataclass
class LabeledSample:
    sample_id: str
    label: int
    synthetic: bool = False
    split: str = "unassigned"
    degenerate: bool = False


@dataclass
class DatasetManifest:
    samples: list
    patches: np.ndarray  # uint8 [n, 27, 27, 3], row i belongs to samples[i]
    mean_image: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.samples) != len(self.patches):
            raise StateError("one patch per sample required")

    def __len__(self):
        return len(self.samples)

    @property
    def labels(self):
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def class_counts(self):
        labels, counts = np.unique(self.labels, return_counts=True)
        return {int(l): int(c) for l, c in zip(labels, counts)}

    def indices(self, split):
        return np.array([i for i, s in enumerate(self.samples) if s.split == split], dtype=np.int64)

    def with_samples(self, samples):
        return replace(self, samples=samples)


# ingestion

def reflect_index(idx, n):
    """Map any integer index onto ``[0, n)`` by mirror reflection about the
    first and last pixel (edge pixels are not repeated)."""
    idx = np.asarray(idx, dtype=np.int64)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    m = np.mod(idx, period)
    return np.where(m >= n, period - m, m)


def extract_patch(image, x, y):
    """27x27 patch centred at column ``x``, row ``y`` with reflection padding."""
    h, w = image.shape[:2]
    rows = reflect_index(np.arange(y - HALF, y + HALF + 1), h)
    cols = reflect_index(np.arange(x - HALF, x + HALF + 1), w)
    return image[np.ix_(rows, cols)]


def _load_rgb(path):
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def read_groundtruth(path):
    """Parse the ground-truth CSV into ``(line, image_id, x, y, class_id)`` rows."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["image_id", "x", "y", "class_id"]:
            raise ParseError("expected header image_id,x,y,class_id", line=1)
        for rec in reader:
            line = reader.line_num
            if not rec or all(not f.strip() for f in rec):
                continue
            if len(rec) != 4:
                raise ParseError(f"expected 4 fields, got {len(rec)}", line=line)
            image_id = rec[0].strip()
            try:
                x, y, cls = int(rec[1]), int(rec[2]), int(rec[3])
            except ValueError:
                raise ParseError(f"non-integer field in {rec!r}", line=line) from None
            if not image_id:
                raise ParseError("empty image_id", line=line)
            if cls not in CLASS_NAMES:
                raise ParseError(f"class_id {cls} not in 1..4", line=line)
            rows.append((line, image_id, x, y, cls))
    return rows


def ingest(image_dir, groundtruth_csv) -> DatasetManifest:
    """One patch per ground-truth row; rows outside their image are skipped."""
    rows = read_groundtruth(groundtruth_csv)
    per_image = {}
    for r in rows:
        per_image[r[1]] = per_image.get(r[1], 0) + 1
    image_dir = Path(image_dir)
    cache = {}
    samples, patches = [], []
    for line, image_id, x, y, cls in rows:
        if image_id not in cache:
            path = image_dir / image_id
            if path.suffix.lower() != ".png":
                path = image_dir / f"{image_id}.png"
            if not path.exists():
                raise IngestError(f"missing image for image_id {image_id!r}: {path}")
            cache = {image_id: _load_rgb(path)}  # rows are usually grouped by image
        img = cache[image_id]
        h, w = img.shape[:2]
        if not (0 <= x < w and 0 <= y < h):
            log.warning("line %d: centre (%d, %d) outside %s (%dx%d); row skipped", line, x, y, image_id, w, h)
            continue
        sid = image_id if per_image[image_id] == 1 else f"{image_id}@{x}_{y}"
        samples.append(LabeledSample(sid, cls))
        patches.append(extract_patch(img, x, y))
    arr = np.array(patches, dtype=np.uint8).reshape(-1, PATCH, PATCH, 3)
    prov = {"source": str(Path(groundtruth_csv))}
    return DatasetManifest(samples, arr, None, prov)


# balancing

def balance_dataset(manifest: DatasetManifest, cfg: BalanceConfig, only_split=None) -> DatasetManifest:
    """Append ADASYN samples computed on flattened raw patches.

    With ``only_split`` set, only that split is balanced and synthetic rows
    inherit the split tag (leakage-safe ordering).
    """
    idx = np.arange(len(manifest)) if only_split is None else manifest.indices(only_split)
    X = manifest.patches[idx].reshape(len(idx), -1)
    y = manifest.labels[idx]
    res = balance(X, y, cfg)
    syn_x = res.X[res.synthetic]
    syn_patches = np.clip(np.rint(syn_x), 0, 255).astype(np.uint8).reshape(-1, PATCH, PATCH, 3)
    new = []
    for j, (lab, org) in enumerate(zip(res.y[res.synthetic], res.origin[res.synthetic])):
        seed_sample = manifest.samples[idx[org]]
        split = only_split if only_split is not None else "unassigned"
        new.append(LabeledSample(f"{seed_sample.sample_id}~syn{j:06d}", int(lab), True, split))
    prov = dict(manifest.provenance)
    prov.update({"balance.k": cfg.k_neighbors, "balance.beta": cfg.beta, "balance.d_th": cfg.d_th,
                 "balance.seed": cfg.seed})
    return DatasetManifest(
        [replace(s) for s in manifest.samples] + new,
        np.concatenate([manifest.patches, syn_patches]),
        manifest.mean_image,
        prov,
    )


# splitting

def _per_class_permutations(manifest, seed, min_count):
    rng = np.random.default_rng(seed)
    labels = manifest.labels
    out = {}
    for cls in sorted(set(labels.tolist())):
        members = np.flatnonzero(labels == cls)
        if len(members) < min_count:
            raise SplitError(f"class {cls} has {len(members)} samples; need >= {min_count}")
        out[cls] = members[rng.permutation(len(members))]
    return out


def split(manifest: DatasetManifest, ratios=(0.7, 0.15, 0.15), seed=0) -> DatasetManifest:
    """Stratified train/val/test tags. Val and test get floor allocations,
    train takes the rest."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise SplitError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    samples = [replace(s) for s in manifest.samples]
    for cls, perm in _per_class_permutations(manifest, seed, 3).items():
        n = len(perm)
        n_val = int(np.floor(n * ratios[1] + 1e-9))
        n_test = int(np.floor(n * ratios[2] + 1e-9))
        n_train = n - n_val - n_test
        for pos, i in enumerate(perm):
            samples[i].split = "train" if pos < n_train else ("val" if pos < n_train + n_val else "test")
    return manifest.with_samples(samples)


def split_2fold(manifest: DatasetManifest, seed=0) -> DatasetManifest:
    """Stratified halves; an odd class puts its extra sample in fold1."""
    samples = [replace(s) for s in manifest.samples]
    for cls, perm in _per_class_permutations(manifest, seed, 2).items():
        n1 = (len(perm) + 1) // 2
        for pos, i in enumerate(perm):
            samples[i].split = "fold1" if pos < n1 else "fold2"
    return manifest.with_samples(samples)


# normalization

def compute_mean_image(manifest: DatasetManifest, split="train", indices=None):
    """Per-pixel, per-channel mean over one split (float64 ``[27, 27, 3]``)."""
    idx = manifest.indices(split) if indices is None else np.asarray(indices)
    if len(idx) == 0:
        raise StateError(f"no samples in split {split!r}")
    return manifest.patches[idx].astype(np.float64).mean(axis=0)


def apply_mean_subtract(patches, mean_image):
    """Signed float32 tensors; no clamping."""
    return (np.asarray(patches, dtype=np.float64) - mean_image).astype(np.float32)


# manifest I/O

def _fmt_bool(b):
    return "1" if b else "0"


def write_manifest(manifest: DatasetManifest, out_dir, patches_name="patches.npy"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / patches_name, manifest.patches)
    counts = ";".join(f"{k}:{v}" for k, v in sorted(manifest.class_counts.items()))
    mean = "none" if manifest.mean_image is None else ",".join(repr(float(v)) for v in manifest.mean_image.ravel())
    lines = [f"format={MANIFEST_FORMAT}", f"n_samples={len(manifest)}", f"class_counts={counts}",
             f"patches={patches_name}", f"mean_image={mean}"]
    lines += [f"provenance.{k}={v}" for k, v in sorted(manifest.provenance.items())]
    lines += ["[samples]", "sample_id,label,synthetic,split,degenerate"]
    lines += [f"{s.sample_id},{s.label},{_fmt_bool(s.synthetic)},{s.split},{_fmt_bool(s.degenerate)}"
              for s in manifest.samples]
    path = out / "dataset.manifest"
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "dataset.manifest"
    text = path.read_text().splitlines()
    header, samples = {}, []
    try:
        start = text.index("[samples]")
    except ValueError:
        raise ParseError(f"{path}: missing [samples] section") from None
    for no, line in enumerate(text[:start], 1):
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"{path}: expected key=value", line=no)
        k, v = line.split("=", 1)
        header[k] = v
    if header.get("format") != MANIFEST_FORMAT:
        raise ParseError(f"{path}: unsupported format {header.get('format')!r}", line=1)
    for no, line in enumerate(text[start + 2:], start + 3):
        if not line:
            continue
        f = line.split(",")
        if len(f) != 5 or f[3] not in SPLITS:
            raise ParseError(f"{path}: bad sample row {line!r}", line=no)
        samples.append(LabeledSample(f[0], int(f[1]), f[2] == "1", f[3], f[4] == "1"))
    patches = np.load(path.parent / header["patches"])
    mean = None
    if header.get("mean_image", "none") != "none":
        mean = np.array([float(v) for v in header["mean_image"].split(",")]).reshape(PATCH, PATCH, 3)
    prov = {k[len("provenance."):]: v for k, v in header.items() if k.startswith("provenance.")}
    m = DatasetManifest(samples, patches, mean, prov)
    if int(header.get("n_samples", len(m))) != len(m):
        raise ParseError(f"{path}: n_samples does not match the sample table")
    return m


# feature files

def write_feature_csv(path, sample_ids, labels, feats):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "label"] + FEATURE_NAMES)
        for sid, lab, row in zip(sample_ids, labels, np.asarray(feats)):
            vals = [int(row[0])] + [repr(float(v)) for v in row[1:5]] + [int(row[5])] + [repr(float(v)) for v in row[6:]]
            w.writerow([sid, int(lab)] + vals)


def read_feature_csv(path):
    """Return ``(sample_ids, labels, features [n, 9])``."""
    ids, labels, rows = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["sample_id", "label"] + FEATURE_NAMES:
            raise ParseError(f"{path}: unexpected feature CSV header", line=1)
        for rec in reader:
            if not rec:
                continue
            if len(rec) != 11:
                raise ParseError(f"{path}: expected 11 fields", line=reader.line_num)
            ids.append(rec[0])
            labels.append(int(rec[1]))
            rows.append([float(v) for v in rec[2:]])
    return ids, np.array(labels, dtype=np.int64), np.array(rows, dtype=np.float64).reshape(-1, 9)


_OLCV = struct.Struct("<4sIII")


def write_cnn_features(path, feats):
    a = np.ascontiguousarray(feats, dtype="<f4")
    if a.ndim != 2:
        raise FormatError("CNN features must be [n_samples, dim]")
    with open(path, "wb") as fh:
        fh.write(_OLCV.pack(b"OLCV", 1, a.shape[0], a.shape[1]))
        fh.write(a.tobytes())


def read_cnn_features(path):
    data = Path(path).read_bytes()
    if len(data) < _OLCV.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, n, d = _OLCV.unpack_from(data)
    if magic != b"OLCV":
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != 1:
        raise FormatError(f"{path}: unsupported version {version}")
    if len(data) != _OLCV.size + 4 * n * d:
        raise FormatError(f"{path}: expected {n}x{d} floats")
    return np.frombuffer(data, dtype="<f4", offset=_OLCV.size).reshape(n, d).astype(np.float32)
