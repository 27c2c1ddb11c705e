"""Dataset distillation by matching teacher training trajectories.

One distillation step: pick a teacher trajectory, start a student at the
teacher's epoch-t weights, train it for N steps on the synthetic set (with a
learnable step size alpha), and penalise the normalised distance between
where the student lands and where the teacher was one epoch later:

    loss = |theta_student_N - theta_teacher_{t+1}|^2 / |theta_t - theta_{t+1}|^2

The gradient of that loss with respect to the synthetic pixels and alpha
flows through all N unrolled updates.

The self-adaptive part is the matching-horizon controller: start with only
epoch 0 available (T = 1), and after every step measure a validation loss at
the *frontier* epoch T, which the matching loop never trains on.  When the
recorded validation series shows a statistically significant downward trend
(Pearson correlation against the iteration index below -lam * sqrt(1/(n-2))),
the pool expands (T grows), the counters reset, and matching continues.  A
run ends when `max_iter` iterations pass without an expansion, or when the
teacher trajectories run out of epochs.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import binio
from .errors import (DataError, DegeneratePairError, DivergenceError,
                     ShapeError, TrajectoryExhaustedError)
from .nets import ParamVector, ce_expr, one_hot

ALPHA_FLOOR = 1e-8
DEGENERATE_TOL = 1e-20

CHECKPOINT_MAGIC = b"STMS"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# the synthetic set


@dataclass(frozen=True)
class SyntheticDataset:
    """The distilled set: free pixel images, fixed class-major labels, and
    the learnable inner-loop step size.  Pixels are unconstrained reals (they
    often live in whitened space)."""

    images: ad.Tensor    # [n, C, H, W]
    labels: np.ndarray   # int32 [n], class-major: ipc entries of class 0, ...
    alpha: float         # inner SGD step size, >= ALPHA_FLOOR

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ShapeError(f"synthetic images must be [n, C, H, W], got {self.images.shape}")
        lab = np.ascontiguousarray(np.asarray(self.labels, dtype=np.int32))
        if lab.shape != (self.images.shape[0],):
            raise ShapeError("one label per synthetic image required")
        if self.alpha < ALPHA_FLOOR and self.alpha != 0.0:
            raise DataError(f"alpha {self.alpha} below floor {ALPHA_FLOOR}")
        object.__setattr__(self, "labels", lab)
        object.__setattr__(self, "alpha", float(self.alpha))

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def classes(self) -> int:
        return int(self.labels.max()) + 1 if self.n else 0


def init_synthetic(classes: int, ipc: int, image_shape, mode: str, seed: int,
                   alpha_init: float, source=None) -> SyntheticDataset:
    """Fresh synthetic set: `mode` is "noise" (gaussian around mid-grey),
    "real" (seeded sample of `ipc` train images per class from `source`),
    or "top" (the `ipc` highest-confidence train images per class, so the
    start point is deterministic and `seed` only steers the outer loop)."""
    if classes < 2 or ipc < 1:
        raise DataError(f"need classes >= 2 and ipc >= 1, got {classes}, {ipc}")
    if alpha_init <= 0:
        raise DataError(f"alpha_init must be positive, got {alpha_init}")
    c, h, w = (int(s) for s in image_shape)
    labels = np.repeat(np.arange(classes, dtype=np.int32), ipc)
    if mode == "noise":
        base = ad.rng_tensor((classes * ipc, c, h, w), "normal", seed)
        images = ad.Tensor(base.array * 0.25 + 0.5)
    elif mode in ("real", "top"):
        if source is None:
            raise DataError(f'init mode "{mode}" needs a source dataset')
        rng = np.random.Generator(np.random.PCG64(int(seed)))
        picks = []
        from .curate import TRAIN  # local import; curate pulls no heavy deps
        for cls in range(classes):
            (members,) = np.nonzero((source.labels == cls) & (source.split == TRAIN))
            if members.size < ipc:
                raise DataError(f"class {cls} has {members.size} train images, need {ipc}")
            if mode == "real":
                picks.append(rng.choice(members, size=ipc, replace=False))
            else:
                order = members[np.argsort(-source.confidence[members], kind="stable")]
                picks.append(order[:ipc])
        sel = np.concatenate(picks)
        if source.images.shape[1:] != (c, h, w):
            raise ShapeError(f"source images {source.images.shape[1:]} != requested {(c, h, w)}")
        images = ad.Tensor(source.images[sel])
    else:
        raise DataError(f'init mode must be "noise", "real", or "top", got {mode!r}')
    return SyntheticDataset(images, labels, float(alpha_init))


# ---------------------------------------------------------------------------
# inner unroll and the matching loss


@dataclass(frozen=True)
class Unrolled:
    """Student weights after N synthetic steps, as a graph expression, plus
    the two leaves hypergradients are taken against."""

    theta_end: ad.Node
    pixels: ad.Node
    alpha: ad.Node


def inner_unroll(theta_start: ParamVector, syn: SyntheticDataset, n_steps: int) -> Unrolled:
    """Differentiable N-step full-batch SGD on the synthetic set.

    n_steps=0 returns the start weights untouched; alpha=0 leaves every step
    a no-op.  Raises DivergenceError naming the step if a loss goes
    non-finite mid-unroll.
    """
    if n_steps < 0:
        raise DataError(f"n_steps must be >= 0, got {n_steps}")
    arch = theta_start.arch
    if syn.images.shape[1:] != arch.input_shape:
        raise ShapeError(
            f"synthetic images {syn.images.shape[1:]} do not fit arch {arch.input_shape}")
    if syn.classes > arch.classes:
        raise DataError(f"synthetic labels need {syn.classes} classes, arch has {arch.classes}")
    dtype = syn.images.dtype
    pixels = ad.leaf(syn.images)
    alpha = ad.leaf(np.asarray(syn.alpha, dtype=dtype))
    theta: ad.Node = ad.constant(theta_start.array, dtype=dtype)
    onehot = ad.constant(one_hot(syn.labels, arch.classes, dtype=dtype))
    alpha_vec = ad.broadcast(ad.reshape(alpha, (1,)), (arch.param_count,))
    for step in range(n_steps):
        loss = ce_expr(arch, theta, pixels, onehot)
        if not np.isfinite(float(loss.value)):
            raise DivergenceError(f"synthetic loss non-finite at unroll step {step}")
        (g,) = ad.gradient(loss, [theta])
        theta = ad.sub(theta, ad.mul(alpha_vec, g))
    return Unrolled(theta, pixels, alpha)


def unroll_values(theta_start: ParamVector, syn: SyntheticDataset, n_steps: int) -> np.ndarray:
    """Value-only twin of inner_unroll (no retained graph, first-order only).

    Performs the identical float arithmetic, so results match inner_unroll's
    theta_end bit for bit.
    """
    if n_steps < 0:
        raise DataError(f"n_steps must be >= 0, got {n_steps}")
    arch = theta_start.arch
    dtype = syn.images.dtype
    theta = theta_start.array.astype(dtype, copy=True)
    onehot = ad.constant(one_hot(syn.labels, arch.classes, dtype=dtype))
    pixels = ad.constant(syn.images)
    alpha_vec = np.broadcast_to(np.asarray(syn.alpha, dtype=dtype).reshape(1), (arch.param_count,))
    for step in range(n_steps):
        tnode = ad.leaf(theta)
        loss = ce_expr(arch, tnode, pixels, onehot)
        if not np.isfinite(float(loss.value)):
            raise DivergenceError(f"synthetic loss non-finite at unroll step {step}")
        (g,) = ad.gradient(loss, [tnode])
        theta = theta - alpha_vec * g.value
    return theta


def _sq_dist64(a: np.ndarray, b: np.ndarray) -> float:
    d = a.astype(np.float64) - b.astype(np.float64)
    return float(np.dot(d, d))


@dataclass(frozen=True)
class MatchLoss:
    """Normalised trajectory-matching loss; expr is differentiable when the
    student end point came in as a graph node."""

    value: float
    numerator: float
    denominator: float
    expr: ad.Node | None


def match_loss(student_end, anchor: ParamVector, target: ParamVector) -> MatchLoss:
    """|student - target|^2 / |anchor - target|^2.

    student_end: ParamVector (value-only result) or Node (differentiable).
    anchor/target: the teacher pair being matched; they must be distinct
    (denominator above 1e-20) or DegeneratePairError is raised.
    """
    if anchor.arch != target.arch:
        raise ShapeError("anchor and target come from different architectures")
    den = _sq_dist64(anchor.array, target.array)
    if den <= DEGENERATE_TOL:
        raise DegeneratePairError(
            f"anchor and target are numerically identical (|diff|^2 = {den:.3e})")
    if isinstance(student_end, ParamVector):
        if student_end.arch != anchor.arch:
            raise ShapeError("student and anchor come from different architectures")
        num = _sq_dist64(student_end.array, target.array)
        return MatchLoss(num / den, num, den, None)
    node: ad.Node = student_end
    if node.value.ndim != 1 or node.size != anchor.arch.param_count:
        raise ShapeError(
            f"student end point has shape {node.shape}, need ({anchor.arch.param_count},)")
    diff = ad.sub(node, ad.constant(target.array, dtype=node.dtype))
    expr = ad.scale(ad.sum_sq(diff), 1.0 / den)
    num = _sq_dist64(node.value, target.array)
    return MatchLoss(num / den, num, den, expr)


# ---------------------------------------------------------------------------
# trend statistics (the expansion controller)


def pearson_r(series) -> float:
    """Pearson correlation of a series against its index 0..n-1.

    Needs n >= 3.  A trendless degenerate series (zero variance) returns
    0.0.  The result is clamped to [-1, 1] so downstream threshold tests
    cannot be tripped by float roundoff.
    """
    y = np.asarray(series, dtype=np.float64)
    if y.ndim != 1:
        raise ShapeError(f"series must be 1-d, got shape {y.shape}")
    n = y.size
    if n < 3:
        raise DataError(f"pearson_r needs >= 3 points, got {n}")
    x = np.arange(n, dtype=np.float64)
    xd = x - x.mean()
    yd = y - y.mean()
    sy = float(np.sqrt(np.dot(yd, yd)))
    if sy == 0.0:
        return 0.0
    sx = float(np.sqrt(np.dot(xd, xd)))
    r = float(np.dot(xd, yd) / (sx * sy))
    return min(1.0, max(-1.0, r))


def should_expand(series, lam: float) -> bool:
    """True when the series trends down significantly: r < -lam * sigma with
    sigma = sqrt(1/(n-2)), the null std of Pearson's r."""
    if lam <= 0:
        raise DataError(f"lam must be positive, got {lam}")
    n = len(series)
    if n < 3:
        return False
    sigma = math.sqrt(1.0 / (n - 2))
    return pearson_r(series) < -lam * sigma


# ---------------------------------------------------------------------------
# run state and the two optimisers


@dataclass
class StmState:
    """Mutable controller state; everything needed to resume a run exactly."""

    lam: float
    max_iter: int
    n_steps: int
    seed: int
    t: int = 0
    T: int = 1
    iter: int = 0
    step_count: int = 0
    last_buffer: int = -1
    expand_increment: int = 1
    ell_val: list = field(default_factory=list)

    def __post_init__(self):
        if self.lam <= 0:
            raise DataError(f"lam must be positive, got {self.lam}")
        if self.max_iter < 1:
            raise DataError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.n_steps < 1:
            raise DataError(f"n_steps must be >= 1, got {self.n_steps}")
        if self.expand_increment < 1:
            raise DataError(f"expand_increment must be >= 1, got {self.expand_increment}")


def _min_len(buffers) -> int:
    return min(len(b) for b in buffers)


def _check_buffers(buffers):
    if not buffers:
        raise DataError("need at least one teacher trajectory")
    arch = buffers[0].arch
    for b in buffers[1:]:
        if b.arch != arch:
            raise ShapeError("teacher trajectories mix architectures")


def _draw_index(seed: int, step_count: int, n: int) -> int:
    ss = np.random.SeedSequence((int(seed), int(step_count)))
    return int(np.random.Generator(np.random.PCG64(ss)).integers(n))


def distill_step(state: StmState, buffers, syn: SyntheticDataset,
                 lr_pixels: float, lr_alpha: float):
    """One matching iteration: advance t cyclically, draw a trajectory,
    unroll, and take one SGD step on the pixels and alpha.

    Returns (updated synthetic set, matching loss value).  Requires every
    buffer to hold at least T + N + 1 snapshots (the frontier validation
    epoch must exist).
    """
    _check_buffers(buffers)
    need = state.T + state.n_steps + 1
    if _min_len(buffers) < need:
        raise TrajectoryExhaustedError(
            f"trajectories hold {_min_len(buffers)} snapshots, need >= {need} "
            f"for T={state.T}, N={state.n_steps}")
    state.step_count += 1
    state.iter += 1
    state.t += 1
    if state.t >= state.T:
        state.t = 0
    k = _draw_index(state.seed, state.step_count, len(buffers))
    state.last_buffer = k
    buf = buffers[k]
    anchor, target = buf[state.t], buf[state.t + 1]

    unrolled = inner_unroll(anchor, syn, state.n_steps)
    ml = match_loss(unrolled.theta_end, anchor, target)
    g_pix, g_alpha = ad.gradient(ml.expr, [unrolled.pixels, unrolled.alpha])
    if not (np.all(np.isfinite(g_pix.value)) and np.isfinite(g_alpha.value.item())):
        raise DivergenceError(f"hypergradient non-finite at step {state.step_count}")

    dtype = syn.images.dtype
    new_images = syn.images.array - dtype.type(lr_pixels) * g_pix.value
    ga = dtype.type(g_alpha.value.item())
    new_alpha = float(dtype.type(syn.alpha) - dtype.type(lr_alpha) * ga)
    new_alpha = max(new_alpha, ALPHA_FLOOR)
    new_syn = SyntheticDataset(ad.Tensor(new_images, dtype=dtype), syn.labels, new_alpha)
    return new_syn, ml.value


def validation_loss(state: StmState, buffers, syn: SyntheticDataset) -> float:
    """Matching loss at the frontier epoch T of the trajectory the last step
    trained on.  Appends to state.ell_val; never updates the synthetic set.

    The frontier pair (theta_T, theta_{T+1}) sits outside the matching pool
    (t only reaches T-1), so this measures generalisation along the teacher's
    trajectory rather than fit.
    """
    _check_buffers(buffers)
    if state.last_buffer < 0:
        raise DataError("validation requires a completed distill step first")
    buf = buffers[state.last_buffer]
    if state.T + 1 >= len(buf):
        raise TrajectoryExhaustedError(
            f"validation epoch {state.T + 1} beyond trajectory of {len(buf)} snapshots")
    anchor, target = buf[state.T], buf[state.T + 1]
    theta_end = unroll_values(anchor, syn, state.n_steps)
    den = _sq_dist64(anchor.array, target.array)
    if den <= DEGENERATE_TOL:
        raise DegeneratePairError("frontier snapshots are numerically identical")
    val = _sq_dist64(theta_end, target.array) / den
    state.ell_val.append(val)
    return val


def maybe_expand(state: StmState) -> bool:
    """Apply the expansion rule to the recorded validation series.  On
    expansion: T grows, the iteration counter and the series reset, t keeps
    cycling from where it was."""
    if not should_expand(state.ell_val, state.lam):
        return False
    state.T += state.expand_increment
    state.iter = 0
    state.ell_val = []
    return True


@dataclass
class RunHistory:
    """Per-iteration log of a distillation run."""

    rows: list = field(default_factory=list)   # dicts: step/iter/t/T/buffer/train/val/alpha
    expansions: list = field(default_factory=list)  # (global step, new T)
    warning: str = ""

    def append(self, **kw):
        self.rows.append(kw)


def run_stm(buffers, syn: SyntheticDataset, *, n_steps: int, lr_pixels: float,
            lr_alpha: float, seed: int, lam: float = 5.0, max_iter: int = 1000,
            expand_increment: int = 1, state: StmState | None = None,
            history: RunHistory | None = None, log_every: int = 0):
    """Full self-adaptive run.  Returns (synthetic set, state, history).

    Pass the state/history/syn loaded from a checkpoint to resume; the
    continuation is bit-identical to an uninterrupted run because every
    random draw is keyed on (seed, global step count) rather than generator
    state.
    """
    _check_buffers(buffers)
    if state is None:
        state = StmState(lam=lam, max_iter=max_iter, n_steps=n_steps, seed=seed,
                         expand_increment=expand_increment)
    if history is None:
        history = RunHistory()
    if _min_len(buffers) < state.T + state.n_steps + 1:
        raise TrajectoryExhaustedError(
            f"trajectories hold {_min_len(buffers)} snapshots; even the initial pool "
            f"T=1 needs {state.T + state.n_steps + 1}")
    while state.iter < state.max_iter:
        syn, train = distill_step(state, buffers, syn, lr_pixels, lr_alpha)
        val = validation_loss(state, buffers, syn)
        history.append(step=state.step_count, iter=state.iter, t=state.t, T=state.T,
                       buffer=state.last_buffer, train=train, val=val, alpha=syn.alpha)
        if log_every and state.step_count % log_every == 0:
            print(f"[stm] step {state.step_count} T={state.T} iter={state.iter} "
                  f"train={train:.4f} val={val:.4f} alpha={syn.alpha:.5f}")
        if maybe_expand(state):
            history.expansions.append((state.step_count, state.T))
            if _min_len(buffers) < state.T + state.n_steps + 1:
                history.warning = (
                    f"stopped: pool expanded to T={state.T} but trajectories hold "
                    f"only {_min_len(buffers)} snapshots")
                break
    return syn, state, history


def run_mtt(buffers, syn: SyntheticDataset, *, iterations: int, t_max: int,
            m_steps: int, n_steps: int, lr_pixels: float, lr_alpha: float,
            seed: int, history: RunHistory | None = None):
    """Fixed-horizon trajectory matching (the non-adaptive baseline).

    Every iteration samples a start epoch t uniformly from [0, t_max) and
    matches theta_{t+m_steps}.  Same inner unroll and update rule as the
    adaptive run, so budgets are directly comparable.
    """
    _check_buffers(buffers)
    if iterations < 1:
        raise DataError(f"iterations must be >= 1, got {iterations}")
    if t_max < 1:
        raise DataError(f"t_max must be >= 1, got {t_max}")
    if m_steps < 1:
        raise DataError(f"m_steps must be >= 1, got {m_steps}")
    if _min_len(buffers) < t_max + m_steps:
        raise TrajectoryExhaustedError(
            f"trajectories hold {_min_len(buffers)} snapshots, need >= {t_max + m_steps} "
            f"for t_max={t_max}, M={m_steps}")
    if history is None:
        history = RunHistory()
    for it in range(1, iterations + 1):
        ss = np.random.SeedSequence((int(seed), int(it)))
        rng = np.random.Generator(np.random.PCG64(ss))
        k = int(rng.integers(len(buffers)))
        t = int(rng.integers(t_max))
        buf = buffers[k]
        anchor, target = buf[t], buf[t + m_steps]
        unrolled = inner_unroll(anchor, syn, n_steps)
        ml = match_loss(unrolled.theta_end, anchor, target)
        g_pix, g_alpha = ad.gradient(ml.expr, [unrolled.pixels, unrolled.alpha])
        if not (np.all(np.isfinite(g_pix.value)) and np.isfinite(g_alpha.value.item())):
            raise DivergenceError(f"hypergradient non-finite at iteration {it}")
        dtype = syn.images.dtype
        new_images = syn.images.array - dtype.type(lr_pixels) * g_pix.value
        ga = dtype.type(g_alpha.value.item())
        new_alpha = float(dtype.type(syn.alpha) - dtype.type(lr_alpha) * ga)
        syn = SyntheticDataset(ad.Tensor(new_images, dtype=dtype), syn.labels,
                               max(new_alpha, ALPHA_FLOOR))
        history.append(step=it, iter=it, t=t, T=t_max, buffer=k,
                       train=ml.value, val=float("nan"), alpha=syn.alpha)
    return syn, history


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str, syn: SyntheticDataset, state: StmState | None,
                    history: RunHistory, meta: dict | None = None):
    """Write the synthetic set plus (optionally) resumable run state."""
    with open(path, "wb") as fh:
        w = binio.Writer(fh)
        w.magic(CHECKPOINT_MAGIC)
        w.u32(CHECKPOINT_VERSION)
        n, c, h, wd = syn.images.shape
        w.u32(n)
        w.u32(c)
        w.u32(h)
        w.u32(wd)
        w.array(syn.images.array, np.float32)
        w.array(syn.labels, np.int32)
        w.f64(float(syn.alpha))
        w.u8(1 if state is not None else 0)
        if state is not None:
            w.u32(state.t)
            w.u32(state.T)
            w.u32(state.iter)
            w.u32(state.n_steps)
            w.u32(state.expand_increment)
            w.u32(state.max_iter)
            w.u64(state.seed)
            w.u64(state.step_count)
            w.i32(state.last_buffer)
            w.f64(state.lam)
            w.u32(len(state.ell_val))
            for v in state.ell_val:
                w.f64(v)
        w.u32(len(history.rows))
        for row in history.rows:
            w.u64(int(row["step"]))
            w.u32(int(row["iter"]))
            w.u32(int(row["t"]))
            w.u32(int(row["T"]))
            w.i32(int(row["buffer"]))
            w.f64(float(row["train"]))
            w.f64(float(row["val"]))
            w.f64(float(row["alpha"]))
        w.u32(len(history.expansions))
        for step, new_t in history.expansions:
            w.u64(int(step))
            w.u32(int(new_t))
        kv = dict(meta or {})
        kv["warning"] = history.warning
        w.kv_block(kv)


def load_checkpoint(path: str):
    """Read back (syn, state-or-None, history, meta)."""
    with open(path, "rb") as fh:
        r = binio.Reader(fh, name=os.path.basename(path))
        r.magic(CHECKPOINT_MAGIC)
        r.version(CHECKPOINT_VERSION)
        n = r.u32()
        c = r.u32()
        h = r.u32()
        wd = r.u32()
        images = r.array(n * c * h * wd, np.float32).reshape(n, c, h, wd)
        labels = r.array(n, np.int32)
        alpha = r.f64()
        syn = SyntheticDataset(ad.Tensor(images), labels, alpha)
        state = None
        if r.u8():
            t, big_t, it, n_steps, inc, max_iter = (r.u32() for _ in range(6))
            seed = r.u64()
            step_count = r.u64()
            last_buffer = r.i32()
            lam = r.f64()
            ell = [r.f64() for _ in range(r.u32())]
            state = StmState(lam=lam, max_iter=max_iter, n_steps=n_steps, seed=seed,
                             t=t, T=big_t, iter=it, step_count=step_count,
                             last_buffer=last_buffer, expand_increment=inc, ell_val=ell)
        history = RunHistory()
        for _ in range(r.u32()):
            history.append(step=r.u64(), iter=r.u32(), t=r.u32(), T=r.u32(),
                           buffer=r.i32(), train=r.f64(), val=r.f64(), alpha=r.f64())
        history.expansions = [(r.u64(), r.u32()) for _ in range(r.u32())]
        meta = r.kv_block()
        r.expect_eof()
    history.warning = meta.pop("warning", "")
    return syn, state, history, meta
