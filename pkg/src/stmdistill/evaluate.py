"""Downstream evaluation: train fresh networks on a candidate set (distilled
or a real subset) and report test accuracy over several seeds."""

from __future__ import annotations

import hashlib
import statistics
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .curate import TRAIN, LabeledDataset
from .distill import SyntheticDataset
from .errors import DataError, DivergenceError, ShapeError
from .nets import ArchDescriptor, ParamVector, accuracy, ce_expr, init_params, one_hot


@dataclass(frozen=True)
class TrainConfig:
    """How evaluation networks get trained.

    lr=None means "use the candidate's own learned step size"; that is only
    available for distilled sets, which carry one.
    """

    epochs: int = 300
    lr: float | None = None
    batch_size: int = 0          # 0 = full batch
    momentum: float = 0.5


@dataclass(frozen=True)
class EvalReport:
    accuracies: tuple          # one per network, in seed order
    mean: float
    std: float                 # sample std (n-1); 0.0 for a single network
    diverged: tuple            # indices of runs that went non-finite
    lr_used: float
    n_nets: int
    seconds: float
    fingerprint: str           # hashes arch + eval config + test set

    def row(self, name: str) -> str:
        flag = f"  diverged={list(self.diverged)}" if self.diverged else ""
        return f"{name:<12} {self.mean * 100:6.2f} +/- {self.std * 100:5.2f}  (n={self.n_nets}){flag}"


def _fingerprint(arch: ArchDescriptor, cfg: TrainConfig, test_images, test_labels,
                 n_nets: int) -> str:
    # deliberately excludes cfg.lr: the step size travels with the candidate
    # (a distilled set brings its learned one), while everything here pins
    # the shared protocol two reports must agree on to be comparable
    h = hashlib.sha256()
    h.update(arch.key().encode())
    h.update(f"{cfg.epochs};{cfg.batch_size};{cfg.momentum};{n_nets}".encode())
    h.update(np.ascontiguousarray(test_images, dtype=np.float32).tobytes())
    h.update(np.ascontiguousarray(test_labels, dtype=np.int32).tobytes())
    return h.hexdigest()[:16]


def _train_one(images: np.ndarray, labels: np.ndarray, arch: ArchDescriptor,
               cfg: TrainConfig, lr: float, seed: int) -> tuple[ParamVector, bool]:
    """Returns (params, diverged).  On divergence the last finite weights are
    returned so the caller can still score something meaningful."""
    n = images.shape[0]
    onehot = one_hot(labels, arch.classes)
    theta = init_params(arch, seed).array.copy()
    vel = np.zeros_like(theta)
    bs = n if cfg.batch_size in (0, None) or cfg.batch_size >= n else cfg.batch_size
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    last_good = theta.copy()
    for _ in range(cfg.epochs):
        perm = rng.permutation(n) if bs < n else np.arange(n)
        for start in range(0, n, bs):
            idx = perm[start:start + bs]
            tnode = ad.leaf(theta)
            loss = ce_expr(arch, tnode, ad.constant(images[idx], dtype=np.float32),
                           ad.constant(onehot[idx]))
            if not np.isfinite(float(loss.value)):
                return ParamVector(arch, ad.Tensor(last_good)), True
            (g,) = ad.gradient(loss, [tnode])
            vel = cfg.momentum * vel + g.value
            theta = theta - np.float32(lr) * vel
        if not np.all(np.isfinite(theta)):
            return ParamVector(arch, ad.Tensor(last_good)), True
        last_good = theta.copy()
    return ParamVector(arch, ad.Tensor(theta)), False


def _as_train_arrays(data, cfg: TrainConfig):
    """Accepts a SyntheticDataset or a LabeledDataset (train rows only)."""
    if isinstance(data, SyntheticDataset):
        lr = cfg.lr if cfg.lr is not None else data.alpha
        if lr <= 0:
            raise DataError(f"training step size must be positive, got {lr}")
        return data.images.array, data.labels, float(lr)
    if isinstance(data, LabeledDataset):
        if cfg.lr is None:
            raise DataError("a real subset has no learned step size; set cfg.lr")
        part = data.select(data.split == TRAIN) if (data.split == TRAIN).any() else data
        return part.images, part.labels, float(cfg.lr)
    raise DataError(f"cannot evaluate object of type {type(data).__name__}")


def evaluate(data, test_images, test_labels, arch: ArchDescriptor, n_nets: int,
             cfg: TrainConfig, seed: int = 0) -> EvalReport:
    """Train `n_nets` fresh nets (seeds seed..seed+n-1) on `data`, score each
    on the test set, and summarise.

    Diverged runs keep their last finite weights, get scored anyway, and are
    flagged in the report rather than silently dropped.
    """
    test_images = np.asarray(test_images)
    test_labels = np.asarray(test_labels)
    if test_images.ndim != 4 or test_images.shape[0] == 0:
        raise DataError("test set is empty or mis-shaped")
    if test_images.shape[1:] != arch.input_shape:
        raise ShapeError(f"test images {test_images.shape[1:]} != arch {arch.input_shape}")
    if n_nets < 1:
        raise DataError(f"n_nets must be >= 1, got {n_nets}")
    images, labels, lr = _as_train_arrays(data, cfg)
    if images.shape[0] == 0:
        raise DataError("candidate training set is empty")
    if images.shape[1:] != arch.input_shape:
        raise ShapeError(f"candidate images {images.shape[1:]} != arch {arch.input_shape}")

    t0 = time.time()
    accs, diverged = [], []
    for i in range(n_nets):
        params, bad = _train_one(images, labels, arch, cfg, lr, seed + i)
        if bad:
            diverged.append(i)
        accs.append(accuracy(params, test_images, test_labels))
    mean = statistics.fmean(accs)
    std = statistics.stdev(accs) if len(accs) > 1 else 0.0
    return EvalReport(tuple(accs), mean, std, tuple(diverged), lr, n_nets,
                      time.time() - t0,
                      _fingerprint(arch, cfg, test_images, test_labels, n_nets))


def random_baseline(dataset: LabeledDataset, ipc: int, seed: int) -> LabeledDataset:
    """Seeded choice of `ipc` train images per class; the standard floor any
    distilled set has to beat."""
    if ipc < 1:
        raise DataError(f"ipc must be >= 1, got {ipc}")
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    picks = []
    for cls in range(dataset.classes):
        (members,) = np.nonzero((dataset.labels == cls) & (dataset.split == TRAIN))
        if members.size < ipc:
            raise DataError(f"class {cls} has {members.size} train images, need {ipc}")
        picks.append(rng.choice(members, size=ipc, replace=False))
    return dataset.select(np.concatenate(picks))


@dataclass(frozen=True)
class Comparison:
    text: str
    values: dict
    distilled_wins: bool


def compare(distilled: EvalReport, random: EvalReport, full: EvalReport | None = None) -> Comparison:
    """Side-by-side summary; all reports must score the same test set and
    architecture (checked via fingerprints)."""
    for other, name in ((random, "random"), (full, "full")):
        if other is not None and other.fingerprint != distilled.fingerprint:
            raise DataError(
                f"report fingerprints differ (distilled vs {name}); "
                "they were not evaluated under the same conditions")
    gap = distilled.mean - random.mean
    wins = gap > (distilled.std + random.std)
    lines = ["set          acc%   +/- std", random.row("random")]
    lines.append(distilled.row("distilled"))
    if full is not None:
        lines.append(full.row("full"))
    lines.append(f"gap (distilled - random) = {gap * 100:+.2f} points"
                 + ("  [significant]" if wins else ""))
    values = {
        "random_mean": random.mean, "random_std": random.std,
        "distilled_mean": distilled.mean, "distilled_std": distilled.std,
        "gap": gap, "distilled_wins": wins,
    }
    if full is not None:
        values["full_mean"] = full.mean
        values["full_std"] = full.std
    return Comparison("\n".join(lines), values, wins)
