"""Expert trajectory generation: train a net normally, keep every epoch's
weights.  Those snapshot sequences are the supervision signal the distiller
matches against, so their format and determinism matter more than speed.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import binio, imageops
from .errors import (ArchMismatchError, DataError, DivergenceError, ShapeError,
                     TruncatedFileError)
from .nets import ArchDescriptor, ParamVector, ce_expr, init_params, one_hot

TRAJECTORY_MAGIC = b"STMT"
TRAJECTORY_VERSION = 1

_NORM_CODE = {"none": 0, "instance": 1}
_NORM_NAME = {v: k for k, v in _NORM_CODE.items()}

AUGMENT_OPS = ("hflip", "random_crop_pad4", "cutout", "rotate")


# ---------------------------------------------------------------------------
# ZCA whitening


@dataclass(frozen=True)
class ZcaTransform:
    """Whitening fitted on a training set; apply the same one everywhere."""

    mean: np.ndarray      # float64 [D]
    w: np.ndarray         # float64 [D, D], symmetric
    w_inv: np.ndarray     # float64 [D, D]
    shape: tuple          # (C, H, W) the transform was fitted on
    eps: float


def zca_fit(images, eps: float = 1e-6) -> ZcaTransform:
    """Fit ZCA whitening: W = V diag(1/sqrt(lam + eps)) V^T of the (biased,
    divide-by-n) pixel covariance.  eps=0 demands a full-rank covariance."""
    a = np.asarray(images, dtype=np.float64)
    if a.ndim != 4:
        raise ShapeError(f"zca_fit expects [n, C, H, W], got {a.shape}")
    n = a.shape[0]
    if n < 2:
        raise DataError(f"zca_fit needs >= 2 images, got {n}")
    if eps < 0:
        raise DataError(f"eps must be >= 0, got {eps}")
    flat = a.reshape(n, -1)
    mean = flat.mean(axis=0)
    centered = flat - mean
    cov = centered.T @ centered / n
    lam, vec = np.linalg.eigh(cov)
    if eps == 0.0:
        tol = 1e-10 * max(float(lam.max()), 1.0)
        bad = np.nonzero(lam <= tol)[0]
        if bad.size:
            raise DataError(
                f"covariance is rank-deficient (eigenvalue {lam[bad[0]]:.3e} at "
                f"index {int(bad[0])}); use eps > 0")
    scale = 1.0 / np.sqrt(lam + eps)
    w = (vec * scale) @ vec.T
    w_inv = (vec * np.sqrt(lam + eps)) @ vec.T
    w = (w + w.T) / 2.0
    w_inv = (w_inv + w_inv.T) / 2.0
    return ZcaTransform(mean, w, w_inv, tuple(a.shape[1:]), float(eps))


def _zca_mm(t: ZcaTransform, images, mat: np.ndarray, unshift: bool) -> np.ndarray:
    a = np.asarray(images)
    if a.ndim != 4 or tuple(a.shape[1:]) != t.shape:
        raise ShapeError(f"images {a.shape} do not match fitted shape {t.shape}")
    flat = a.reshape(a.shape[0], -1).astype(np.float64)
    out = (flat - t.mean) @ mat if not unshift else flat @ mat + t.mean
    return out.reshape(a.shape).astype(a.dtype if a.dtype.kind == "f" else np.float32)


def zca_apply(t: ZcaTransform, images) -> np.ndarray:
    return _zca_mm(t, images, t.w, unshift=False)


def zca_invert(t: ZcaTransform, images) -> np.ndarray:
    """Undo zca_apply (exactly, up to roundoff): rescale then un-center."""
    return _zca_mm(t, images, t.w_inv, unshift=True)


# ---------------------------------------------------------------------------
# augmentation


def augment(images, ops, seed: int) -> np.ndarray:
    """Apply the named ops in order with per-image random draws.

    Same seed, same output.  Supported: hflip (coin flip per image),
    random_crop_pad4 (pad 4, random crop), cutout (random quarter-size
    square), rotate (uniform angle).
    """
    a = np.asarray(images)
    if a.ndim != 4:
        raise ShapeError(f"augment expects [n, C, H, W], got {a.shape}")
    if not ops:
        raise DataError("augment called with no ops; pass at least one")
    for op in ops:
        if op not in AUGMENT_OPS:
            raise DataError(f"unknown augment op {op!r}; known: {AUGMENT_OPS}")
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    n, c, h, w = a.shape
    out = a
    for op in ops:
        if op == "hflip":
            flip = rng.random(n) < 0.5
            out = out.copy()
            out[flip] = out[flip, :, :, ::-1]
        elif op == "random_crop_pad4":
            dy = rng.integers(0, 9, size=n)
            dx = rng.integers(0, 9, size=n)
            shifted = [imageops.crop_shift(out[i:i + 1], int(dy[i]), int(dx[i]))
                       for i in range(n)]
            out = np.concatenate(shifted) if shifted else out
        elif op == "cutout":
            size = max(h // 4, 1)
            ys = rng.integers(0, h, size=n) - size // 2
            xs = rng.integers(0, w, size=n) - size // 2
            pieces = [imageops.cutout(out[i:i + 1], int(ys[i]), int(xs[i]), size)
                      for i in range(n)]
            out = np.concatenate(pieces) if pieces else out
        elif op == "rotate":
            out = imageops.rotate(out, rng.uniform(0.0, 360.0, size=n))
    return out.astype(a.dtype)


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class TrajectoryBuffer:
    """Epoch-indexed weight snapshots from one training run.

    snapshots[0] is the initialisation; snapshots[e] is after epoch e.
    """

    arch: ArchDescriptor
    seed: int
    snapshots: list
    meta: dict

    def __len__(self) -> int:
        return len(self.snapshots)

    def __getitem__(self, i: int) -> ParamVector:
        return self.snapshots[i]


def _dataset_fingerprint(images: np.ndarray, labels: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(images, dtype=np.float32).tobytes())
    h.update(np.ascontiguousarray(labels, dtype=np.int32).tobytes())
    return h.hexdigest()[:16]


def _as_arrays(dataset):
    if hasattr(dataset, "images") and hasattr(dataset, "labels"):
        return np.asarray(dataset.images), np.asarray(dataset.labels)
    images, labels = dataset
    return np.asarray(images), np.asarray(labels)


def train_teacher(dataset, arch: ArchDescriptor, epochs: int, lr: float,
                  batch_size: int, seed: int, momentum: float = 0.5,
                  augment_ops=()) -> TrajectoryBuffer:
    """SGD training that appends a weight snapshot after every epoch.

    dataset: LabeledDataset (all rows are used) or an (images, labels) pair;
    pass the train split, not the full set.  Shuffling, init, and any
    augmentation draws all derive from `seed`.
    """
    images, labels = _as_arrays(dataset)
    if images.ndim != 4 or images.shape[1:] != arch.input_shape:
        raise ShapeError(f"images {images.shape} do not fit arch input {arch.input_shape}")
    n = images.shape[0]
    if n < 1:
        raise DataError("training set is empty")
    if epochs < 1:
        raise DataError(f"epochs must be >= 1, got {epochs}")
    if lr <= 0:
        raise DataError(f"lr must be positive, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise DataError(f"momentum must be in [0, 1), got {momentum}")
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    if labels.min() < 0 or labels.max() >= arch.classes:
        raise DataError("labels outside the architecture's class range")

    onehot_all = one_hot(labels, arch.classes)
    theta = init_params(arch, seed).array.copy()
    vel = np.zeros_like(theta)
    snapshots = [ParamVector(arch, ad.Tensor(theta))]
    shuffle_rng = np.random.Generator(np.random.PCG64(int(seed)))
    epoch_losses = []

    for epoch in range(epochs):
        perm = shuffle_rng.permutation(n)
        total, seen = 0.0, 0
        for bi, start in enumerate(range(0, n, batch_size)):
            idx = perm[start:start + batch_size]
            x = images[idx]
            if augment_ops:
                aug_seed = int(np.random.SeedSequence((seed, epoch, bi)).generate_state(1)[0])
                x = augment(x, augment_ops, aug_seed)
            theta_node = ad.leaf(theta)
            loss = ce_expr(arch, theta_node,
                           ad.constant(x, dtype=np.float32),
                           ad.constant(onehot_all[idx]))
            val = float(loss.tensor)
            if not np.isfinite(val):
                raise DivergenceError(
                    f"loss became non-finite at epoch {epoch}, batch {bi}")
            (g,) = ad.gradient(loss, [theta_node])
            vel = momentum * vel + g.value
            theta = theta - np.float32(lr) * vel
            total += val * len(idx)
            seen += len(idx)
        if not np.all(np.isfinite(theta)):
            raise DivergenceError(f"weights became non-finite at epoch {epoch}")
        epoch_losses.append(total / seen)
        snapshots.append(ParamVector(arch, ad.Tensor(theta)))

    from .nets import accuracy  # local import avoids a cycle at module load
    final_acc = accuracy(snapshots[-1], images, labels)
    meta = {
        "lr": repr(float(lr)),
        "batch_size": str(batch_size),
        "epochs": str(epochs),
        "momentum": repr(float(momentum)),
        "seed": str(seed),
        "augment": ",".join(augment_ops),
        "dataset_fingerprint": _dataset_fingerprint(images, labels),
        "final_train_accuracy": f"{final_acc:.4f}",
        "epoch_loss": ",".join(f"{v:.4f}" for v in epoch_losses),
    }
    return TrajectoryBuffer(arch, seed, snapshots, meta)


# ---------------------------------------------------------------------------
# trajectory I/O


def _write_arch(w: binio.Writer, arch: ArchDescriptor):
    c, h, wd = arch.input_shape
    for v in (arch.depth, arch.width, c, h, wd, arch.classes):
        w.u32(v)
    w.u8(_NORM_CODE[arch.norm])


def _read_arch(r: binio.Reader) -> ArchDescriptor:
    depth, width, c, h, wd, classes = (r.u32() for _ in range(6))
    code = r.u8()
    if code not in _NORM_NAME:
        raise TruncatedFileError(f"{r.name}: bad norm code {code}")
    return ArchDescriptor(depth, width, (c, h, wd), classes, _NORM_NAME[code])


def save_trajectory(buffer: TrajectoryBuffer, path: str):
    """Reject degenerate buffers (fewer than 2 snapshots, or consecutive
    snapshots that are identical, e.g. from an lr=0 run), then write."""
    if len(buffer.snapshots) < 2:
        raise DataError(f"trajectory needs >= 2 snapshots, has {len(buffer.snapshots)}")
    for i in range(len(buffer.snapshots) - 1):
        if np.array_equal(buffer.snapshots[i].array, buffer.snapshots[i + 1].array):
            raise DataError(
                f"snapshots {i} and {i + 1} are identical; trajectory carries no signal")
    with open(path, "wb") as fh:
        w = binio.Writer(fh)
        w.magic(TRAJECTORY_MAGIC)
        w.u32(TRAJECTORY_VERSION)
        _write_arch(w, buffer.arch)
        w.u32(len(buffer.snapshots))
        w.u64(buffer.arch.param_count)
        for snap in buffer.snapshots:
            w.array(snap.array, np.float32)
        meta = dict(buffer.meta)
        meta.setdefault("seed", str(buffer.seed))
        w.kv_block(meta)


def load_trajectory(path: str, expected_arch: ArchDescriptor | None = None) -> TrajectoryBuffer:
    with open(path, "rb") as fh:
        r = binio.Reader(fh, name=os.path.basename(path))
        r.magic(TRAJECTORY_MAGIC)
        r.version(TRAJECTORY_VERSION)
        arch = _read_arch(r)
        count = r.u32()
        plen = r.u64()
        if plen != arch.param_count:
            raise TruncatedFileError(
                f"{r.name}: param length {plen} != {arch.param_count} for its arch")
        snaps = [ParamVector(arch, ad.Tensor(r.array(plen, np.float32)))
                 for _ in range(count)]
        meta = r.kv_block()
        r.expect_eof()
    if expected_arch is not None and arch != expected_arch:
        raise ArchMismatchError(
            f"{os.path.basename(path)}: trajectory arch {arch.key()} != expected "
            f"{expected_arch.key()}")
    seed = int(meta.get("seed", "0"))
    return TrajectoryBuffer(arch, seed, snaps, meta)
