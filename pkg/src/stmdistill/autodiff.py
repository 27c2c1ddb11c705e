"""Reverse-mode automatic differentiation over dense float tensors.

The graph is eager: every builder computes its value immediately and records
the operation as a Node.  The backward pass does not write into gradient
buffers; it emits new Nodes, so the output of `gradient` is itself a
differentiable expression and nesting (gradients of gradients) works to any
depth.  That is what lets an outer optimisation differentiate through an
unrolled inner SGD run.

Conventions:
  * float32 is the working precision; float64 is available end to end so
    verification code (finite differences, oracle checks) can run without
    single-precision roundoff.  All nodes of one graph share a dtype.
  * reductions and gradient fan-in accumulate in float64, then cast back.
  * arrays are row-major and treated as immutable once inside the graph.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import GraphError, NonFiniteError, ShapeError

DEFAULT_DTYPE = np.float32

# ---------------------------------------------------------------------------
# values


def _as_array(data, dtype=None) -> np.ndarray:
    a = np.asarray(data)
    if dtype is not None:
        a = a.astype(dtype, copy=False)
    elif not np.issubdtype(a.dtype, np.floating):
        a = a.astype(DEFAULT_DTYPE)
    return np.ascontiguousarray(a)


class Tensor:
    """Immutable dense float array, float32 unless asked otherwise."""

    __slots__ = ("_a",)

    def __init__(self, data, dtype=None):
        a = _as_array(data, dtype=DEFAULT_DTYPE if dtype is None else dtype).copy()
        if not np.issubdtype(a.dtype, np.floating):
            raise TypeError(f"tensor dtype must be floating, got {a.dtype}")
        if not np.all(np.isfinite(a)):
            raise NonFiniteError("tensor contains non-finite values")
        a.setflags(write=False)
        self._a = a

    @classmethod
    def _wrap(cls, a: np.ndarray) -> "Tensor":
        # internal: adopt an array without copying; caller vouches for finiteness
        t = object.__new__(cls)
        if a.flags.writeable:
            a = a.copy()
            a.setflags(write=False)
        t._a = a
        return t

    @property
    def array(self) -> np.ndarray:
        return self._a

    @property
    def shape(self) -> tuple:
        return self._a.shape

    @property
    def dtype(self):
        return self._a.dtype

    @property
    def size(self) -> int:
        return self._a.size

    @property
    def ndim(self) -> int:
        return self._a.ndim

    def item(self) -> float:
        return float(self._a.reshape(-1)[0])

    def ravel(self) -> np.ndarray:
        return self._a.reshape(-1)

    def astype(self, dtype) -> "Tensor":
        return Tensor._wrap(self._a.astype(dtype))

    def __float__(self) -> float:
        if self._a.size != 1:
            raise ShapeError(f"cannot convert shape {self._a.shape} to float")
        return self.item()

    def __repr__(self) -> str:
        return f"Tensor(shape={self._a.shape}, dtype={self._a.dtype.name})"


def tensor_value(x) -> np.ndarray:
    """Array behind a Tensor, Node, or array-like."""
    if isinstance(x, Tensor):
        return x.array
    if isinstance(x, Node):
        return x.value
    return _as_array(x)


# ---------------------------------------------------------------------------
# graph nodes


class Node:
    """One recorded operation; `value` is its eagerly computed result."""

    __slots__ = ("op", "inputs", "value", "meta")

    def __init__(self, op: str, inputs: tuple, value: np.ndarray, meta=None):
        self.op = op
        self.inputs = inputs
        if value.flags.writeable:
            value.setflags(write=False)
        self.value = value
        self.meta = meta

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def tensor(self) -> Tensor:
        return Tensor._wrap(self.value)

    def __repr__(self) -> str:
        return f"Node({self.op}, shape={self.value.shape})"


def leaf(data, dtype=None) -> Node:
    """Differentiation variable.  `gradient` can be taken with respect to it."""
    a = _as_array(tensor_value(data), dtype)
    if not np.all(np.isfinite(a)):
        raise NonFiniteError("leaf contains non-finite values")
    return Node("leaf", (), a)


def constant(data, dtype=None) -> Node:
    """Graph input treated as fixed data; gradients do not flow into it."""
    a = _as_array(tensor_value(data), dtype)
    return Node("const", (), a)


def _check_same_dtype(*nodes: Node):
    dt = nodes[0].dtype
    for n in nodes[1:]:
        if n.dtype != dt:
            raise ShapeError(f"mixed graph dtypes {dt} and {n.dtype}")


def _check_same_shape(op: str, a: Node, b: Node):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ, {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# operation builders (each computes eagerly and records a node)


def add(a: Node, b: Node) -> Node:
    _check_same_shape("add", a, b)
    _check_same_dtype(a, b)
    return Node("add", (a, b), a.value + b.value)


def add_n(nodes: Sequence[Node]) -> Node:
    """Sum of same-shaped nodes; accumulates in float64 before casting back."""
    if not nodes:
        raise GraphError("add_n of zero nodes")
    if len(nodes) == 1:
        return nodes[0]
    first = nodes[0]
    _check_same_dtype(*nodes)
    for n in nodes[1:]:
        _check_same_shape("add_n", first, n)
    acc = np.zeros(first.shape, dtype=np.float64)
    for n in nodes:
        acc += n.value
    return Node("add_n", tuple(nodes), acc.astype(first.dtype))


def mul(a: Node, b: Node) -> Node:
    _check_same_shape("mul", a, b)
    _check_same_dtype(a, b)
    return Node("mul", (a, b), a.value * b.value)


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return Node("scale", (a,), a.value * a.dtype.type(c), meta=c)


def neg(a: Node) -> Node:
    return scale(a, -1.0)


def sub(a: Node, b: Node) -> Node:
    return add(a, neg(b))


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} vs {b.shape}")
    _check_same_dtype(a, b)
    return Node("matmul", (a, b), a.value @ b.value)


def permute(a: Node, axes: Sequence[int]) -> Node:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.value.ndim)):
        raise ShapeError(f"permute axes {axes} invalid for shape {a.shape}")
    # a transposed view; downstream kernels read strided arrays natively
    return Node("permute", (a,), np.transpose(a.value, axes), meta=axes)


def reshape(a: Node, shape) -> Node:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"reshape {a.shape} -> {shape}: size mismatch")
    return Node("reshape", (a,), a.value.reshape(shape), meta=shape)


def gather(a: Node, idx: np.ndarray) -> Node:
    """out.flat[j] = a.flat[idx.flat[j]]; index -1 reads as zero (padding)."""
    idx = np.asarray(idx, dtype=np.int64)
    flat = idx.reshape(-1)
    if flat.size and (flat.min() < -1 or flat.max() >= a.size):
        raise ShapeError(f"gather index out of range for input of size {a.size}")
    has_pad = bool(flat.size) and bool((flat < 0).any())
    safe = np.where(flat >= 0, flat, 0) if has_pad else flat
    out = a.value.reshape(-1)[safe]
    if has_pad:
        out = np.where(flat >= 0, out, a.dtype.type(0))
    meta = {"idx": flat, "idx_shape": idx.shape, "in_shape": a.shape, "pad": has_pad}
    return Node("gather", (a,), np.ascontiguousarray(out.reshape(idx.shape)), meta=meta)


def scatter_add(a: Node, idx: np.ndarray, out_shape) -> Node:
    """out.flat[i] = sum of a.flat[j] over idx.flat[j] == i; -1 entries drop."""
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    out_shape = tuple(int(s) for s in out_shape)
    if idx.size != a.size:
        raise ShapeError(f"scatter_add: index size {idx.size} != input size {a.size}")
    size = int(np.prod(out_shape, dtype=np.int64))
    if idx.size and idx.max() >= size:
        raise ShapeError(f"scatter_add index out of range for output of size {size}")
    vals = a.value.reshape(-1)
    keep = idx >= 0
    if not keep.all():
        vals = vals[keep]
        ids = idx[keep]
    else:
        ids = idx
    # bincount accumulates in float64
    out = np.bincount(ids, weights=vals, minlength=size).astype(a.dtype)
    meta = {"idx": idx, "in_shape": a.shape, "out_shape": out_shape}
    return Node("scatter_add", (a,), out.reshape(out_shape), meta=meta)


def sum_axis(a: Node, axes) -> Node:
    """Sum over `axes` keeping reduced dims as size 1; float64 accumulation."""
    axes = tuple(sorted(int(x) for x in (axes if isinstance(axes, Iterable) else (axes,))))
    for ax in axes:
        if not 0 <= ax < a.value.ndim:
            raise ShapeError(f"sum_axis axis {ax} invalid for shape {a.shape}")
    val = a.value.sum(axis=axes, keepdims=True, dtype=np.float64).astype(a.dtype)
    return Node("sum_axis", (a,), val, meta=axes)


def sum_all(a: Node) -> Node:
    """Reduce everything to a rank-0 scalar."""
    if a.value.ndim == 0:
        return a
    return reshape(sum_axis(a, range(a.value.ndim)), ())


def broadcast(a: Node, shape) -> Node:
    """Expand size-1 axes to `shape`; ndim must already match."""
    shape = tuple(int(s) for s in shape)
    if a.value.ndim != len(shape):
        raise ShapeError(f"broadcast {a.shape} -> {shape}: rank mismatch")
    for have, want in zip(a.shape, shape):
        if have != want and have != 1:
            raise ShapeError(f"broadcast {a.shape} -> {shape}: axis not expandable")
    # zero-stride view; never materialised
    return Node("broadcast", (a,), np.broadcast_to(a.value, shape), meta=shape)


def _im2col_value(x: np.ndarray, b: int, c: int, h: int, w: int) -> np.ndarray:
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * h * w, c * 9)


def _col2im_value(g: np.ndarray, b: int, c: int, h: int, w: int) -> np.ndarray:
    g6 = g.reshape(b, h, w, c, 3, 3)
    acc = np.zeros((b, c, h + 2, w + 2), dtype=np.float64)
    for ky in range(3):
        for kx in range(3):
            acc[:, :, ky:ky + h, kx:kx + w] += g6[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
    return acc[:, :, 1:h + 1, 1:w + 1].astype(g.dtype)


def im2col(x: Node) -> Node:
    """Unfold 3x3 zero-padded patches: [B,C,H,W] -> [B*H*W, C*9].

    Row (b, h, w), column (c, ky, kx) holds x[b, c, h-1+ky, w-1+kx] (zero
    outside the image).  Linear, with col2im as its adjoint.
    """
    if x.value.ndim != 4:
        raise ShapeError(f"im2col input must be [B,C,H,W], got {x.shape}")
    b, c, h, w = x.shape
    return Node("im2col", (x,), _im2col_value(x.value, b, c, h, w), meta=(b, c, h, w))


def col2im(g: Node, image_shape) -> Node:
    """Adjoint of im2col: fold [B*H*W, C*9] patch rows back into [B,C,H,W],
    accumulating overlaps in float64."""
    b, c, h, w = (int(s) for s in image_shape)
    if g.value.ndim != 2 or g.shape != (b * h * w, c * 9):
        raise ShapeError(f"col2im input {g.shape} does not fold to {(b, c, h, w)}")
    return Node("col2im", (g,), _col2im_value(g.value, b, c, h, w), meta=(b, c, h, w))


def exp(a: Node) -> Node:
    return Node("exp", (a,), np.exp(a.value))


def log(a: Node) -> Node:
    return Node("log", (a,), np.log(a.value))


def recip(a: Node) -> Node:
    return Node("recip", (a,), 1.0 / a.value if a.dtype == np.float64 else (1.0 / a.value).astype(a.dtype))


def sqrt(a: Node) -> Node:
    return Node("sqrt", (a,), np.sqrt(a.value))


def relu(a: Node) -> Node:
    return Node("relu", (a,), np.maximum(a.value, a.dtype.type(0)))


# ---------------------------------------------------------------------------
# backward rules: node, incoming cotangent -> [(input position, contribution)]


def _vjp(node: Node, g: Node):
    op = node.op
    if op == "add":
        return [(0, g), (1, g)]
    if op == "add_n":
        return [(i, g) for i in range(len(node.inputs))]
    if op == "mul":
        a, b = node.inputs
        return [(0, mul(g, b)), (1, mul(g, a))]
    if op == "scale":
        return [(0, scale(g, node.meta))]
    if op == "matmul":
        a, b = node.inputs
        return [(0, matmul(g, permute(b, (1, 0)))), (1, matmul(permute(a, (1, 0)), g))]
    if op == "permute":
        inv = tuple(np.argsort(node.meta))
        return [(0, permute(g, inv))]
    if op == "reshape":
        return [(0, reshape(g, node.inputs[0].shape))]
    if op == "gather":
        m = node.meta
        return [(0, scatter_add(reshape(g, (g.size,)), m["idx"], m["in_shape"]))]
    if op == "scatter_add":
        m = node.meta
        return [(0, reshape(gather(g, m["idx"]), m["in_shape"]))]
    if op == "im2col":
        return [(0, col2im(g, node.meta))]
    if op == "col2im":
        return [(0, im2col(g))]
    if op == "sum_axis":
        return [(0, broadcast(g, node.inputs[0].shape))]
    if op == "broadcast":
        a = node.inputs[0]
        axes = tuple(i for i, (have, want) in enumerate(zip(a.shape, node.meta)) if have != want)
        return [(0, sum_axis(g, axes) if axes else g)]
    if op == "exp":
        return [(0, mul(g, node))]
    if op == "log":
        return [(0, mul(g, recip(node.inputs[0])))]
    if op == "recip":
        return [(0, neg(mul(g, mul(node, node))))]
    if op == "sqrt":
        return [(0, scale(mul(g, recip(node)), 0.5))]
    if op == "relu":
        mask = (node.inputs[0].value > 0).astype(node.dtype)
        return [(0, mul(g, constant(mask)))]
    raise GraphError(f"no backward rule for op {op!r}")


def _topo_from(root: Node):
    """Post-order (inputs before consumers) of every node reachable from root."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for inp in node.inputs:
            if id(inp) not in seen:
                stack.append((inp, False))
    return order, seen


def gradient(root: Node, leaves: Sequence[Node]) -> list[Node]:
    """d(root)/d(leaf) for each requested leaf, as differentiable nodes.

    `root` must hold a single value.  Every leaf must appear in root's graph.
    The returned nodes are ordinary graph nodes, so a second `gradient` call
    over them yields higher-order derivatives.
    """
    if root.size != 1:
        raise GraphError(f"gradient root must be scalar, got shape {root.shape}")
    order, seen = _topo_from(root)
    leaf_ids = {id(lf) for lf in leaves}
    for lf in leaves:
        if id(lf) not in seen:
            raise GraphError("requested leaf is not part of the root's graph")

    # mark nodes that lie on a path from any requested leaf up to the root
    needed: set[int] = set(leaf_ids)
    for node in order:  # inputs come first, so one forward scan suffices
        if id(node) in needed:
            continue
        if any(id(inp) in needed for inp in node.inputs):
            needed.add(id(node))

    cots: dict[int, list[Node]] = {id(root): [constant(np.ones(root.shape, dtype=root.dtype))]}
    grads: dict[int, Node] = {}
    for node in reversed(order):
        pending = cots.pop(id(node), None)
        if pending is None:
            continue
        g = add_n(pending)
        if id(node) in leaf_ids:
            grads[id(node)] = g
        if node.op in ("leaf", "const"):
            continue
        for pos, contrib in _vjp(node, g):
            inp = node.inputs[pos]
            if id(inp) in needed:
                cots.setdefault(id(inp), []).append(contrib)

    out = []
    for lf in leaves:
        g = grads.get(id(lf))
        if g is None:
            # leaf is in the graph but received no cotangent (fully masked path)
            g = constant(np.zeros(lf.shape, dtype=lf.dtype))
        if g.shape != lf.shape:
            raise GraphError(f"gradient shape {g.shape} does not match leaf {lf.shape}")
        out.append(g)
    return out


# ---------------------------------------------------------------------------
# composite primitives (the public op surface used by the network code)


def conv2d_3x3(x: Node, w: Node) -> Node:
    """3x3 stride-1 convolution with zero padding 1, via im2col + matmul."""
    if x.value.ndim != 4:
        raise ShapeError(f"conv2d input must be [B,C,H,W], got {x.shape}")
    if w.value.ndim != 4 or w.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d kernel must be [O,C,3,3], got {w.shape}")
    b, c, h, wd = x.shape
    o = w.shape[0]
    if w.shape[1] != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {w.shape[1]}")
    cols = im2col(x)
    wmat = permute(reshape(w, (o, c * 9)), (1, 0))
    y = matmul(cols, wmat)
    return permute(reshape(y, (b, h, wd, o)), (0, 3, 1, 2))


def avgpool_2x2(x: Node) -> Node:
    """Non-overlapping 2x2 mean pooling; spatial dims must be even."""
    if x.value.ndim != 4:
        raise ShapeError(f"avgpool input must be [B,C,H,W], got {x.shape}")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool needs even spatial dims, got {x.shape}")
    blocks = permute(reshape(x, (b, c, h // 2, 2, w // 2, 2)), (0, 1, 2, 4, 3, 5))
    vals = reshape(blocks, (b * c * (h // 2) * (w // 2), 4))
    summed = sum_axis(vals, 1)
    return reshape(scale(summed, 0.25), (b, c, h // 2, w // 2))


def flatten(x: Node) -> Node:
    if x.value.ndim < 2:
        raise ShapeError(f"flatten needs at least 2 dims, got {x.shape}")
    return reshape(x, (x.shape[0], x.size // x.shape[0]))


def softmax_cross_entropy(logits: Node, onehot: Node) -> Node:
    """Mean cross-entropy between softmax(logits) and one-hot target rows."""
    if logits.value.ndim != 2:
        raise ShapeError(f"logits must be [B,K], got {logits.shape}")
    _check_same_shape("softmax_cross_entropy", logits, onehot)
    rows = onehot.value.sum(axis=1)
    if not np.allclose(rows, 1.0, atol=1e-5):
        raise ShapeError("target rows must each sum to 1")
    b = logits.shape[0]
    # constant shift keeps exp() in range and does not change the result
    m = constant(logits.value.max(axis=1, keepdims=True))
    z = sub(logits, broadcast(m, logits.shape))
    logsum = log(sum_axis(exp(z), 1))
    logsoft = sub(z, broadcast(logsum, logits.shape))
    return scale(sum_all(mul(onehot, logsoft)), -1.0 / b)


def sum_sq(x: Node) -> Node:
    """Sum of squared entries, as a rank-0 node."""
    return sum_all(mul(x, x))


_PRIMITIVES: dict[str, Callable] = {
    "matmul": lambda args, p: matmul(*args),
    "conv2d-3x3-pad1": lambda args, p: conv2d_3x3(*args),
    "relu": lambda args, p: relu(*args),
    "avgpool-2x2": lambda args, p: avgpool_2x2(*args),
    "add": lambda args, p: add(*args),
    "scale": lambda args, p: scale(args[0], p["factor"]),
    "flatten": lambda args, p: flatten(*args),
    "softmax_cross_entropy": lambda args, p: softmax_cross_entropy(*args),
    "sum_sq": lambda args, p: sum_sq(*args),
}

_PRIMITIVE_ARITY = {
    "matmul": 2, "conv2d-3x3-pad1": 2, "relu": 1, "avgpool-2x2": 1,
    "add": 2, "scale": 1, "flatten": 1, "softmax_cross_entropy": 2, "sum_sq": 1,
}


def primitive_apply(op: str, args: Sequence[Node], **params) -> Node:
    """Apply a named differentiable primitive to graph nodes.

    This is the validated public surface: unknown names, wrong arity, shape
    mismatches and non-finite inputs are all rejected with specific errors.
    """
    fn = _PRIMITIVES.get(op)
    if fn is None:
        raise GraphError(f"unknown primitive {op!r}; known: {sorted(_PRIMITIVES)}")
    if len(args) != _PRIMITIVE_ARITY[op]:
        raise GraphError(f"{op} takes {_PRIMITIVE_ARITY[op]} args, got {len(args)}")
    for a in args:
        if not isinstance(a, Node):
            raise GraphError(f"{op}: arguments must be graph nodes")
        if not np.all(np.isfinite(a.value)):
            raise NonFiniteError(f"{op}: input contains non-finite values")
    out = fn(args, params)
    if not np.all(np.isfinite(out.value)):
        raise NonFiniteError(f"{op}: result contains non-finite values")
    return out


# ---------------------------------------------------------------------------
# verification and sampling helpers


def finite_difference(f: Callable, x: Tensor, eps: float = 1e-3) -> Tensor:
    """Central-difference gradient of scalar f at x, one component at a time.

    The difference quotient is formed in float64.  Use a float64 `x` when
    comparing against exact gradients; float32 evaluation noise easily
    dominates (f(x+eps)-f(x-eps)) otherwise.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")

    def _scalar(v) -> float:
        if isinstance(v, (Tensor, Node)):
            arr = tensor_value(v)
            if arr.size != 1:
                raise ShapeError(f"finite_difference target must be scalar, got {arr.shape}")
            return float(arr.reshape(-1)[0])
        return float(v)

    base = x.array
    flat = base.reshape(-1)
    out = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + eps
        fp = _scalar(f(Tensor(bumped.reshape(base.shape), dtype=base.dtype)))
        bumped[i] = flat[i] - eps
        fm = _scalar(f(Tensor(bumped.reshape(base.shape), dtype=base.dtype)))
        out[i] = (np.float64(fp) - np.float64(fm)) / (2.0 * eps)
    return Tensor(out.reshape(base.shape), dtype=np.float64)


def rng_tensor(shape, distribution: str, seed: int, dtype=DEFAULT_DTYPE) -> Tensor:
    """Seeded sample: 'normal' is standard normal, 'uniform' is [0, 1).

    Backed by numpy's PCG64 generator, so equal seeds give equal tensors on
    any platform.
    """
    shape = tuple(int(s) for s in shape)
    g = np.random.Generator(np.random.PCG64(int(seed)))
    if distribution == "normal":
        a = g.standard_normal(shape)
    elif distribution == "uniform":
        a = g.random(shape)
    else:
        raise ValueError(f"unknown distribution {distribution!r}")
    return Tensor(a.astype(dtype))
