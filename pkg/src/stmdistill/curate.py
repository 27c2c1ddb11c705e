"""Dataset container, curation recipe, and a toy morphology generator.

The curation recipe mirrors how a crowd-labelled survey catalogue gets turned
into a training set: keep the top-k most confidently labelled images per
class, split train/test, then grow the training split with small rotations
(galaxy morphology has no preferred on-sky orientation).

The generator draws 9 archetypes a small convnet can tell apart: three
smooth profiles of increasing ellipticity, two edge-on disks (with/without a
central bulge), and four spiral patterns (barred/unbarred two-arm, tight
three-arm, loose two-arm).  Per-image nuisance draws (orientation, centre
jitter, scale, noise level) give real within-class variance, and the label
confidence degrades with the drawn noise level, so "top confidence" is a
meaningful curation signal.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, replace

import numpy as np

from . import binio, imageops
from .errors import DataError, ShapeError, TruncatedFileError

TRAIN, TEST, UNSPLIT = 0, 1, 2
_SPLIT_NAMES = {"train": TRAIN, "test": TEST, "unsplit": UNSPLIT}

DATASET_MAGIC = b"STMD"
DATASET_VERSION = 1

CLASS_NAMES = (
    "smooth-round", "smooth-inbetween", "smooth-cigar",
    "edgeon-bulge", "edgeon-flat",
    "spiral-barred", "spiral-2arm", "spiral-tight3", "spiral-loose",
)


@dataclass(frozen=True)
class LabeledDataset:
    """Images with integer labels, annotator confidence, and split tags."""

    images: np.ndarray      # float32 [n, C, H, W], values in [0, 1]
    labels: np.ndarray      # int32 [n], >= 0
    confidence: np.ndarray  # float32 [n], in [0, 1]
    split: np.ndarray       # uint8 [n], TRAIN / TEST / UNSPLIT

    def __post_init__(self):
        img = np.ascontiguousarray(np.asarray(self.images, dtype=np.float32))
        lab = np.ascontiguousarray(np.asarray(self.labels, dtype=np.int32))
        conf = np.ascontiguousarray(np.asarray(self.confidence, dtype=np.float32))
        spl = np.ascontiguousarray(np.asarray(self.split, dtype=np.uint8))
        if img.ndim != 4:
            raise ShapeError(f"images must be [n, C, H, W], got {img.shape}")
        n = img.shape[0]
        if not (lab.shape == conf.shape == spl.shape == (n,)):
            raise ShapeError("labels/confidence/split must all have one entry per image")
        if n and (img.min() < 0.0 or img.max() > 1.0):
            raise DataError("pixel values must lie in [0, 1]")
        if n and lab.min() < 0:
            raise DataError("labels must be non-negative")
        if n and (conf.min() < 0.0 or conf.max() > 1.0):
            raise DataError("confidence must lie in [0, 1]")
        if n and not np.isin(spl, (TRAIN, TEST, UNSPLIT)).all():
            raise DataError("split tags must be 0 (train), 1 (test) or 2 (unsplit)")
        object.__setattr__(self, "images", img)
        object.__setattr__(self, "labels", lab)
        object.__setattr__(self, "confidence", conf)
        object.__setattr__(self, "split", spl)

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def classes(self) -> int:
        return int(self.labels.max()) + 1 if self.n else 0

    def select(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.images[idx], self.labels[idx],
                              self.confidence[idx], self.split[idx])

    def part(self, name: str) -> "LabeledDataset":
        tag = _SPLIT_NAMES.get(name)
        if tag is None:
            raise DataError(f"unknown split {name!r}; use train/test/unsplit")
        return self.select(self.split == tag)


# ---------------------------------------------------------------------------
# curation


def curate_topk(dataset: LabeledDataset, k_per_class: int, train_per_class: int,
                seed: int = 0) -> LabeledDataset:
    """Keep the k most confident images of each class, then split.

    Within a class, images are ranked by descending confidence (original
    order breaks ties), the top k survive, and a seeded permutation assigns
    `train_per_class` of them to the train split and the rest to test.
    Output order is class-major, confidence-ranked within each class.
    """
    if not 0 < train_per_class < k_per_class:
        raise DataError(
            f"need 0 < train_per_class < k_per_class, got {train_per_class}, {k_per_class}")
    if dataset.n == 0:
        raise DataError("cannot curate an empty dataset")
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    pieces = []
    for cls in range(dataset.classes):
        (members,) = np.nonzero(dataset.labels == cls)
        if members.size < k_per_class:
            raise DataError(
                f"class {cls} has {members.size} images, need >= {k_per_class}")
        order = members[np.argsort(-dataset.confidence[members], kind="stable")]
        kept = order[:k_per_class]
        tags = np.full(k_per_class, TEST, dtype=np.uint8)
        tags[rng.permutation(k_per_class)[:train_per_class]] = TRAIN
        part = dataset.select(kept)
        pieces.append(replace(part, split=tags))
    return LabeledDataset(
        np.concatenate([p.images for p in pieces]),
        np.concatenate([p.labels for p in pieces]),
        np.concatenate([p.confidence for p in pieces]),
        np.concatenate([p.split for p in pieces]),
    )


def rotate_augment(dataset: LabeledDataset, angle_step_deg: float, count: int) -> LabeledDataset:
    """Grow a training set with rotations k * angle_step, k = 1..count.

    Only train-tagged rows may be augmented; rotating test data would leak
    it into training.  Output is image-major: all rotations of image 0,
    then of image 1, and so on; size = input size * count.
    """
    if count < 1:
        raise DataError(f"rotation count must be >= 1, got {count}")
    if dataset.n == 0:
        raise DataError("cannot augment an empty dataset")
    bad = dataset.split != TRAIN
    if bad.any():
        raise DataError(
            f"refusing to augment non-train rows (first offender: index {int(np.argmax(bad))})")
    stack = [imageops.rotate(dataset.images, (k + 1) * angle_step_deg) for k in range(count)]
    # [count, n, ...] -> image-major [n * count, ...]
    images = np.stack(stack, axis=1).reshape((-1,) + dataset.images.shape[1:])
    rep = np.repeat(np.arange(dataset.n), count)
    return LabeledDataset(np.clip(images, 0.0, 1.0), dataset.labels[rep],
                          dataset.confidence[rep], dataset.split[rep])


# ---------------------------------------------------------------------------
# toy morphology generator


@dataclass(frozen=True)
class GeneratorSpec:
    """Knobs for the toy generator; defaults fit a desk-scale run."""

    size: int = 32          # 16 or 32
    classes: int = 9        # 2..9, a prefix of CLASS_NAMES
    noise: float = 0.06     # base additive noise level

    def __post_init__(self):
        if self.size not in (16, 32):
            raise DataError(f"generator size must be 16 or 32, got {self.size}")
        if not 2 <= self.classes <= 9:
            raise DataError(f"generator supports 2..9 classes, got {self.classes}")
        if not 0.0 <= self.noise < 0.5:
            raise DataError(f"noise level {self.noise} outside [0, 0.5)")


def _blur3(batch: np.ndarray, passes: int = 1) -> np.ndarray:
    # separable binomial blur, zero padding; batch is [n, H, W]
    k = np.array([0.25, 0.5, 0.25])
    out = batch
    for _ in range(passes):
        p = np.pad(out, ((0, 0), (1, 1), (0, 0)))
        out = k[0] * p[:, :-2] + k[1] * p[:, 1:-1] + k[2] * p[:, 2:]
        p = np.pad(out, ((0, 0), (0, 0), (1, 1)))
        out = k[0] * p[:, :, :-2] + k[1] * p[:, :, 1:-1] + k[2] * p[:, :, 2:]
    return out


def _splat(py: np.ndarray, px: np.ndarray, amp: np.ndarray, size: int) -> np.ndarray:
    """Bilinear point splatting; inputs are [n, npts], output [n, size, size]."""
    n = py.shape[0]
    y0 = np.floor(py).astype(np.int64)
    x0 = np.floor(px).astype(np.int64)
    fy = py - y0
    fx = px - x0
    img_off = (np.arange(n) * size * size)[:, None]
    acc = np.zeros(n * size * size, dtype=np.float64)
    for oy, ox, w in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                      (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yi = y0 + oy
        xi = x0 + ox
        ok = (yi >= 0) & (yi < size) & (xi >= 0) & (xi < size)
        flat = (img_off + yi * size + xi)[ok]
        acc += np.bincount(flat, weights=(amp * w)[ok], minlength=acc.size)
    return acc.reshape(n, size, size)


def _smooth_profile(rng, n, size, q_range, scale_mult=1.0):
    s = size / 32.0
    q = rng.uniform(*q_range, size=n)
    rs = rng.uniform(3.8, 5.2, size=n) * s * scale_mult
    phi = rng.uniform(0, 2 * np.pi, size=n)
    cy = (size - 1) / 2 + rng.uniform(-1.5, 1.5, size=n) * s
    cx = (size - 1) / 2 + rng.uniform(-1.5, 1.5, size=n) * s
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy = yy[None] - cy[:, None, None]
    dx = xx[None] - cx[:, None, None]
    c, sn = np.cos(phi)[:, None, None], np.sin(phi)[:, None, None]
    u = c * dx + sn * dy
    v = -sn * dx + c * dy
    r = np.sqrt(u * u + (v / q[:, None, None]) ** 2 + 0.25)
    return np.exp(-r / rs[:, None, None]), (cy, cx, phi)


def _spiral_points(rng, n, size, *, arms, pitch, theta_max, r0, npts=180):
    s = size / 32.0
    phi = rng.uniform(0, 2 * np.pi, size=n)
    cy = (size - 1) / 2 + rng.uniform(-1.2, 1.2, size=n) * s
    cx = (size - 1) / 2 + rng.uniform(-1.2, 1.2, size=n) * s
    pitch_i = pitch * rng.uniform(0.9, 1.1, size=n)
    t = np.linspace(0.0, theta_max, npts)
    r = r0 * s * np.exp(pitch_i[:, None] * t[None, :])          # [n, npts]
    rmax = size / 2.0 - 1.5
    amp0 = np.exp(-r / (7.0 * s)) * (r < rmax)
    pys, pxs, amps = [], [], []
    for k in range(arms):
        ang = phi[:, None] + t[None, :] + 2 * np.pi * k / arms
        pys.append(cy[:, None] + r * np.sin(ang))
        pxs.append(cx[:, None] + r * np.cos(ang))
        amps.append(amp0)
    return (np.concatenate(pys, axis=1), np.concatenate(pxs, axis=1),
            np.concatenate(amps, axis=1), (cy, cx, phi))


def _gaussian2(size, cy, cx, phi, sig_u, sig_v):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy = yy[None] - cy[:, None, None]
    dx = xx[None] - cx[:, None, None]
    c, sn = np.cos(phi)[:, None, None], np.sin(phi)[:, None, None]
    u = c * dx + sn * dy
    v = -sn * dx + c * dy
    su = np.asarray(sig_u)[:, None, None]
    sv = np.asarray(sig_v)[:, None, None]
    return np.exp(-0.5 * ((u / su) ** 2 + (v / sv) ** 2))


def _make_class(rng, cls: int, n: int, size: int) -> np.ndarray:
    s = size / 32.0
    if cls == 0:
        img, _ = _smooth_profile(rng, n, size, (0.88, 1.0))
    elif cls == 1:
        img, _ = _smooth_profile(rng, n, size, (0.48, 0.62))
    elif cls == 2:
        img, _ = _smooth_profile(rng, n, size, (0.22, 0.30), scale_mult=1.15)
    elif cls in (3, 4):
        phi = rng.uniform(0, 2 * np.pi, size=n)
        cy = (size - 1) / 2 + rng.uniform(-1.2, 1.2, size=n) * s
        cx = (size - 1) / 2 + rng.uniform(-1.2, 1.2, size=n) * s
        length = rng.uniform(8.5, 11.0, size=n) * s
        img = _gaussian2(size, cy, cx, phi, length, np.full(n, 1.1 * s))
        if cls == 3:
            img = img + 1.25 * _gaussian2(size, cy, cx, phi,
                                          np.full(n, 2.6 * s), np.full(n, 2.2 * s))
    elif cls == 5:
        py, px, amp, (cy, cx, phi) = _spiral_points(
            rng, n, size, arms=2, pitch=0.30, theta_max=2.4 * np.pi, r0=3.4)
        arms = _blur3(_splat(py, px, amp, size), passes=2) * 2.4
        bar = _gaussian2(size, cy, cx, phi, np.full(n, 4.4 * s), np.full(n, 1.25 * s))
        core = _gaussian2(size, cy, cx, phi, np.full(n, 1.8 * s), np.full(n, 1.8 * s))
        img = arms + 0.85 * bar + 0.7 * core
    elif cls == 6:
        py, px, amp, (cy, cx, phi) = _spiral_points(
            rng, n, size, arms=2, pitch=0.30, theta_max=2.4 * np.pi, r0=2.2)
        arms = _blur3(_splat(py, px, amp, size), passes=2) * 2.4
        core = _gaussian2(size, cy, cx, phi, np.full(n, 2.0 * s), np.full(n, 2.0 * s))
        img = arms + 0.9 * core
    elif cls == 7:
        py, px, amp, (cy, cx, phi) = _spiral_points(
            rng, n, size, arms=3, pitch=0.10, theta_max=3.4 * np.pi, r0=2.6, npts=240)
        arms = _blur3(_splat(py, px, amp, size), passes=2) * 1.9
        core = _gaussian2(size, cy, cx, phi, np.full(n, 1.9 * s), np.full(n, 1.9 * s))
        img = arms + 0.8 * core
    elif cls == 8:
        py, px, amp, (cy, cx, phi) = _spiral_points(
            rng, n, size, arms=2, pitch=0.58, theta_max=1.45 * np.pi, r0=2.4)
        arms = _blur3(_splat(py, px, amp, size), passes=2) * 2.6
        core = _gaussian2(size, cy, cx, phi, np.full(n, 2.0 * s), np.full(n, 2.0 * s))
        img = arms + 0.9 * core
    else:
        raise DataError(f"no recipe for class {cls}")
    peak = img.reshape(n, -1).max(axis=1)
    return img / np.maximum(peak, 1e-9)[:, None, None]


def generate_synthetic(spec: GeneratorSpec, per_class: int, seed: int) -> LabeledDataset:
    """Deterministic toy dataset: `per_class` images of each archetype.

    Confidence falls with the drawn noise level plus annotator jitter, so
    noisier images rank lower, the way crowd confidence behaves.
    """
    if per_class < 1:
        raise DataError(f"per_class must be >= 1, got {per_class}")
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    images, labels, confs = [], [], []
    for cls in range(spec.classes):
        base = _make_class(rng, cls, per_class, spec.size)
        bright = rng.uniform(0.75, 0.95, size=per_class)[:, None, None]
        noise_mult = rng.uniform(0.5, 1.5, size=per_class)
        noisy = base * bright + rng.standard_normal(base.shape) * (
            spec.noise * noise_mult[:, None, None])
        images.append(np.clip(noisy, 0.0, 1.0)[:, None].astype(np.float32))
        labels.append(np.full(per_class, cls, dtype=np.int32))
        jitter = rng.uniform(0.0, 1.0, size=per_class)
        conf = 0.97 - 0.30 * (noise_mult - 0.5) - 0.18 * jitter
        confs.append(np.clip(conf, 0.05, 0.99).astype(np.float32))
    n = spec.classes * per_class
    return LabeledDataset(np.concatenate(images), np.concatenate(labels),
                          np.concatenate(confs), np.full(n, UNSPLIT, dtype=np.uint8))


# ---------------------------------------------------------------------------
# disk I/O


def save_dataset(dataset: LabeledDataset, path: str):
    with open(path, "wb") as fh:
        w = binio.Writer(fh)
        w.magic(DATASET_MAGIC)
        w.u32(DATASET_VERSION)
        n, c, h, wd = dataset.images.shape
        w.u32(n)
        w.u32(c)
        w.u32(h)
        w.u32(wd)
        w.array(dataset.images, np.float32)
        w.array(dataset.labels, np.int32)
        w.array(dataset.confidence, np.float32)
        w.array(dataset.split, np.uint8)


def load_dataset(path: str) -> LabeledDataset:
    with open(path, "rb") as fh:
        r = binio.Reader(fh, name=os.path.basename(path))
        r.magic(DATASET_MAGIC)
        r.version(DATASET_VERSION)
        n = r.u32()
        c = r.u32()
        h = r.u32()
        w = r.u32()
        images = r.array(n * c * h * w, np.float32).reshape(n, c, h, w)
        labels = r.array(n, np.int32)
        conf = r.array(n, np.float32)
        split = r.array(n, np.uint8)
        r.expect_eof()
    return LabeledDataset(images, labels, conf, split)


def import_image_dir(directory: str, labels_csv: str) -> LabeledDataset:
    """Build a dataset from PNG files and a filename,label,confidence CSV."""
    from PIL import Image

    rows = []
    with open(labels_csv, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#"):
                continue
            if row[0].strip().lower() == "filename":
                continue  # header
            if len(row) != 3:
                raise DataError(f"labels csv row needs 3 fields, got {row!r}")
            rows.append((row[0].strip(), int(row[1]), float(row[2])))
    if not rows:
        raise DataError(f"no usable rows in {labels_csv}")

    images = []
    shape = None
    for fname, _, _ in rows:
        path = os.path.join(directory, fname)
        if not os.path.exists(path):
            raise DataError(f"image listed in csv not found: {path}")
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
            a = np.asarray(im, dtype=np.float32) / 255.0
        a = a[None] if a.ndim == 2 else np.moveaxis(a, 2, 0)
        if shape is None:
            shape = a.shape
        elif a.shape != shape:
            raise DataError(f"{fname}: shape {a.shape} differs from first image {shape}")
        images.append(a)
    labels = np.array([r[1] for r in rows], dtype=np.int32)
    conf = np.array([r[2] for r in rows], dtype=np.float32)
    return LabeledDataset(np.stack(images), labels, conf,
                          np.full(len(rows), UNSPLIT, dtype=np.uint8))
