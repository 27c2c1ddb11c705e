"""Small ConvNet classifiers over flat parameter vectors.

Networks are depth-N stacks of [3x3 conv -> (optional instance norm) ->
relu -> 2x2 avgpool] followed by one linear head.  All parameters live in a
single flat vector with a fixed canonical layout, which is what lets teacher
trajectories be stored as raw float arrays and lets the distiller treat
"network weights at step i" as one graph node.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .errors import DataError, ShapeError

_NORMS = ("none", "instance")
_NORM_EPS = 1e-5


@dataclass(frozen=True)
class ArchDescriptor:
    """Shape of one network family member.

    depth: number of conv blocks; each block halves the spatial dims.
    width: channels per conv block.
    input_shape: (C, H, W) of the images the net consumes.
    classes: output dimension.
    norm: "none" or "instance" (per-sample, per-channel spatial whitening).
    """

    depth: int
    width: int
    input_shape: tuple
    classes: int
    norm: str = "none"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.depth < 1:
            raise ShapeError(f"depth must be >= 1, got {self.depth}")
        if self.width < 1:
            raise ShapeError(f"width must be >= 1, got {self.width}")
        if self.classes < 2:
            raise ShapeError(f"need >= 2 classes, got {self.classes}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ShapeError(f"input_shape must be (C, H, W), got {self.input_shape}")
        if self.norm not in _NORMS:
            raise ShapeError(f"norm must be one of {_NORMS}, got {self.norm!r}")
        c, h, w = self.input_shape
        div = 1 << self.depth
        if h % div or w % div:
            raise ShapeError(
                f"spatial dims {h}x{w} must be divisible by 2^depth = {div}")

    @property
    def feature_dim(self) -> int:
        _, h, w = self.input_shape
        return self.width * (h >> self.depth) * (w >> self.depth)

    def param_slices(self):
        """Canonical layout: per block conv weight then bias, then head weight
        and bias.  Returns [(name, offset, shape)]."""
        return _param_slices(self)

    @property
    def param_count(self) -> int:
        name, off, shape = _param_slices(self)[-1]
        return off + int(np.prod(shape))

    def key(self) -> str:
        c, h, w = self.input_shape
        return f"d{self.depth}w{self.width}c{c}x{h}x{w}k{self.classes}n{self.norm}"


@lru_cache(maxsize=64)
def _param_slices(arch: ArchDescriptor):
    out = []
    off = 0
    in_c = arch.input_shape[0]
    for d in range(arch.depth):
        wshape = (arch.width, in_c, 3, 3)
        out.append((f"block{d}.w", off, wshape))
        off += int(np.prod(wshape))
        out.append((f"block{d}.b", off, (arch.width,)))
        off += arch.width
        in_c = arch.width
    out.append(("head.w", off, (arch.feature_dim, arch.classes)))
    off += arch.feature_dim * arch.classes
    out.append(("head.b", off, (arch.classes,)))
    return out


@lru_cache(maxsize=64)
def _slice_plans(arch: ArchDescriptor):
    # gather index arrays for pulling each parameter out of the flat vector
    return tuple((name, np.arange(off, off + int(np.prod(shape)), dtype=np.int64), shape)
                 for name, off, shape in _param_slices(arch))


@dataclass(frozen=True)
class ParamVector:
    """One network's weights as a flat tensor with its architecture."""

    arch: ArchDescriptor
    values: ad.Tensor

    def __post_init__(self):
        if self.values.ndim != 1 or self.values.size != self.arch.param_count:
            raise ShapeError(
                f"parameter vector has {self.values.size} entries, "
                f"architecture needs {self.arch.param_count}")

    @property
    def array(self) -> np.ndarray:
        return self.values.array

    def with_values(self, arr) -> "ParamVector":
        return ParamVector(self.arch, ad.Tensor(arr, dtype=self.values.dtype))


def init_params(arch: ArchDescriptor, seed: int, dtype=ad.DEFAULT_DTYPE) -> ParamVector:
    """Kaiming-uniform conv/linear weights (fan-in), zero biases."""
    g = np.random.Generator(np.random.PCG64(int(seed)))
    flat = np.zeros(arch.param_count, dtype=dtype)
    for name, off, shape in arch.param_slices():
        n = int(np.prod(shape))
        if name.endswith(".b"):
            continue  # biases stay zero
        if len(shape) == 4:
            fan_in = shape[1] * shape[2] * shape[3]
        else:
            fan_in = shape[0]
        bound = float(np.sqrt(6.0 / fan_in))
        flat[off:off + n] = g.uniform(-bound, bound, size=n)
    return ParamVector(arch, ad.Tensor(flat, dtype=dtype))


# ---------------------------------------------------------------------------
# expression builders (theta and images may be any graph node)


def _pull(theta: ad.Node, idx: np.ndarray, shape) -> ad.Node:
    return ad.reshape(ad.gather(theta, idx), shape)


def _instance_norm(x: ad.Node) -> ad.Node:
    b, c, h, w = x.shape
    inv_hw = 1.0 / (h * w)
    mean = ad.scale(ad.sum_axis(x, (2, 3)), inv_hw)
    d = ad.sub(x, ad.broadcast(mean, x.shape))
    var = ad.scale(ad.sum_axis(ad.mul(d, d), (2, 3)), inv_hw)
    eps = ad.constant(np.full(var.shape, _NORM_EPS, dtype=x.dtype))
    return ad.mul(d, ad.broadcast(ad.recip(ad.sqrt(ad.add(var, eps))), x.shape))


def logits_expr(arch: ArchDescriptor, theta: ad.Node, images: ad.Node) -> ad.Node:
    """Build the network forward pass as a graph expression."""
    if theta.value.ndim != 1 or theta.size != arch.param_count:
        raise ShapeError(
            f"theta has shape {theta.shape}, need ({arch.param_count},)")
    if images.value.ndim != 4 or images.shape[1:] != arch.input_shape:
        raise ShapeError(
            f"images have shape {images.shape}, need (B,) + {arch.input_shape}")
    if images.shape[0] < 1:
        raise ShapeError("need at least one image")
    plans = _slice_plans(arch)
    x = images
    for d in range(arch.depth):
        _, widx, wshape = plans[2 * d]
        _, bidx, bshape = plans[2 * d + 1]
        w = _pull(theta, widx, wshape)
        bias = _pull(theta, bidx, (1, bshape[0], 1, 1))
        x = ad.conv2d_3x3(x, w)
        x = ad.add(x, ad.broadcast(bias, x.shape))
        if arch.norm == "instance":
            x = _instance_norm(x)
        x = ad.relu(x)
        x = ad.avgpool_2x2(x)
    x = ad.flatten(x)
    _, widx, wshape = plans[-2]
    _, bidx, bshape = plans[-1]
    logits = ad.matmul(x, _pull(theta, widx, wshape))
    return ad.add(logits, ad.broadcast(_pull(theta, bidx, (1, bshape[0])), logits.shape))


def ce_expr(arch: ArchDescriptor, theta: ad.Node, images: ad.Node, onehot: ad.Node) -> ad.Node:
    """Mean softmax cross-entropy of the network on a batch, as an expression."""
    return ad.softmax_cross_entropy(logits_expr(arch, theta, images), onehot)


# ---------------------------------------------------------------------------
# value-level conveniences


def one_hot(labels, classes: int, dtype=ad.DEFAULT_DTYPE) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ShapeError(f"labels must be 1-d, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise DataError(f"label outside [0, {classes})")
    return np.eye(classes, dtype=dtype)[labels.astype(np.int64)]


def forward(params: ParamVector, images) -> ad.Tensor:
    """Logits for a batch; images is a Tensor or array shaped (B,) + input."""
    node = logits_expr(params.arch, ad.constant(params.array),
                       ad.constant(ad.tensor_value(images), dtype=params.values.dtype))
    return node.tensor


def ce_loss(params: ParamVector, images, labels) -> float:
    """Mean cross-entropy; labels are integer class ids."""
    onehot = one_hot(labels, params.arch.classes, dtype=params.values.dtype)
    node = ce_expr(params.arch, ad.constant(params.array),
                   ad.constant(ad.tensor_value(images), dtype=params.values.dtype),
                   ad.constant(onehot))
    return float(node.tensor)


def accuracy(params: ParamVector, images, labels) -> float:
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise DataError("cannot compute accuracy on an empty set")
    logits = forward(params, images).array
    pred = np.argmax(logits, axis=1)  # np.argmax picks the first (lowest) index on ties
    return float(np.mean(pred == labels))
