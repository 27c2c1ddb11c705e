"""Differentiation engine checks: every primitive against central finite
differences, nesting (higher-order derivatives), and the error contracts."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stmdistill import autodiff as ad
from stmdistill.errors import GraphError, NonFiniteError, ShapeError

F64 = np.float64


def rnd(seed, *shape, low=-1.0, high=1.0):
    g = np.random.Generator(np.random.PCG64(seed))
    return g.uniform(low, high, size=shape).astype(F64)


def grad_arrays(build, x0):
    """Engine gradient and FD gradient of scalar expression build(leaf)."""
    x = ad.leaf(x0)
    (g,) = ad.gradient(build(x), [x])
    fd = ad.finite_difference(lambda t: build(ad.leaf(t)).tensor, ad.Tensor(x0, dtype=F64))
    return g.value, fd.array


def assert_close_rel(got, want, rel=1e-3, floor=1e-6):
    got = np.asarray(got, dtype=F64)
    want = np.asarray(want, dtype=F64)
    denom = np.maximum(np.maximum(np.abs(got), np.abs(want)), floor)
    worst = float(np.max(np.abs(got - want) / denom)) if got.size else 0.0
    assert worst < rel, f"relative error {worst:.3e} >= {rel}"


# ---------------------------------------------------------------------------
# finite-difference agreement for each primitive, 20 seeds apiece


@pytest.mark.parametrize("seed", range(20))
def test_fd_matmul_both_operands(seed):
    a0 = rnd(seed, 3, 4)
    b0 = rnd(seed + 1000, 4, 2)
    ga, fa = grad_arrays(lambda x: ad.sum_sq(ad.matmul(x, ad.constant(b0))), a0)
    assert_close_rel(ga, fa)
    gb, fb = grad_arrays(lambda x: ad.sum_sq(ad.matmul(ad.constant(a0), x)), b0)
    assert_close_rel(gb, fb)


@pytest.mark.parametrize("seed", range(20))
def test_fd_conv2d_both_operands(seed):
    x0 = rnd(seed, 2, 2, 4, 4)
    w0 = rnd(seed + 1000, 3, 2, 3, 3)
    gx, fx = grad_arrays(
        lambda x: ad.sum_sq(ad.primitive_apply("conv2d-3x3-pad1", [x, ad.constant(w0)])), x0)
    assert_close_rel(gx, fx)
    gw, fw = grad_arrays(
        lambda w: ad.sum_sq(ad.primitive_apply("conv2d-3x3-pad1", [ad.constant(x0), w])), w0)
    assert_close_rel(gw, fw)


@pytest.mark.parametrize("seed", range(20))
def test_fd_relu(seed):
    # keep samples away from the kink so the central difference is valid
    x0 = rnd(seed, 17)
    x0 = np.where(np.abs(x0) < 0.05, 0.25, x0)
    g, f = grad_arrays(lambda x: ad.sum_sq(ad.relu(x)), x0)
    assert_close_rel(g, f)


@pytest.mark.parametrize("seed", range(20))
def test_fd_avgpool(seed):
    x0 = rnd(seed, 2, 3, 4, 4)
    g, f = grad_arrays(lambda x: ad.sum_sq(ad.primitive_apply("avgpool-2x2", [x])), x0)
    assert_close_rel(g, f)


@pytest.mark.parametrize("seed", range(20))
def test_fd_elementwise_and_shape_ops(seed):
    x0 = rnd(seed, 4, 6)
    c0 = rnd(seed + 1000, 4, 6)
    cases = [
        lambda x: ad.sum_sq(ad.add(x, ad.constant(c0))),
        lambda x: ad.sum_sq(ad.scale(x, -1.7)),
        lambda x: ad.sum_sq(ad.primitive_apply("flatten", [x])),
        lambda x: ad.sum_sq(x),
        lambda x: ad.sum_sq(ad.mul(x, ad.constant(c0))),
        lambda x: ad.sum_all(ad.exp(ad.scale(x, 0.5))),
        lambda x: ad.sum_all(ad.log(ad.add(ad.mul(x, x), ad.constant(np.full_like(x0, 0.5))))),
        lambda x: ad.sum_all(ad.sqrt(ad.add(ad.mul(x, x), ad.constant(np.full_like(x0, 0.3))))),
        lambda x: ad.sum_all(ad.recip(ad.add(ad.mul(x, x), ad.constant(np.full_like(x0, 2.0))))),
    ]
    for build in cases:
        g, f = grad_arrays(build, x0)
        assert_close_rel(g, f)


@pytest.mark.parametrize("seed", range(20))
def test_fd_softmax_cross_entropy(seed):
    g = np.random.Generator(np.random.PCG64(seed))
    logits0 = g.uniform(-2, 2, size=(4, 5)).astype(F64)
    onehot = np.eye(5, dtype=F64)[g.integers(0, 5, size=4)]
    gg, ff = grad_arrays(
        lambda x: ad.primitive_apply("softmax_cross_entropy", [x, ad.constant(onehot)]), logits0)
    assert_close_rel(gg, ff)


@pytest.mark.parametrize("seed", range(20))
def test_fd_gather_scatter_broadcast_sum(seed):
    g = np.random.Generator(np.random.PCG64(seed))
    x0 = rnd(seed, 12)
    idx = g.integers(-1, 12, size=(3, 5))
    sidx = g.integers(0, 7, size=12)
    cases = [
        lambda x: ad.sum_sq(ad.gather(x, idx)),
        lambda x: ad.sum_sq(ad.scatter_add(x, sidx, (7,))),
        lambda x: ad.sum_sq(ad.broadcast(ad.reshape(x, (12, 1)), (12, 4))),
        lambda x: ad.sum_sq(ad.sum_axis(ad.reshape(x, (3, 4)), 1)),
        lambda x: ad.sum_sq(ad.permute(ad.reshape(x, (3, 4)), (1, 0))),
    ]
    for build in cases:
        gv, fv = grad_arrays(build, x0)
        assert_close_rel(gv, fv)


# ---------------------------------------------------------------------------
# known values


def test_finite_difference_quadratic_is_exact():
    fd = ad.finite_difference(lambda t: ad.sum_sq(ad.leaf(t)).tensor,
                              ad.Tensor([1.0, 2.0], dtype=F64), eps=1e-3)
    np.testing.assert_allclose(fd.array, [2.0, 4.0], atol=1e-5)


def test_cross_entropy_uniform_logits_is_log_k():
    for k in (2, 3, 10):
        logits = ad.constant(np.zeros((4, k)), dtype=F64)
        onehot = ad.constant(np.eye(k, dtype=F64)[np.zeros(4, dtype=int)])
        got = float(ad.primitive_apply("softmax_cross_entropy", [logits, onehot]).tensor)
        assert got == pytest.approx(np.log(k), rel=1e-12)


def test_cross_entropy_hand_value():
    # one row, logits [2, -1], true class 0: loss = log(1 + e^-3)
    logits = ad.leaf(np.array([[2.0, -1.0]]), dtype=F64)
    onehot = ad.constant(np.array([[1.0, 0.0]]), dtype=F64)
    got = float(ad.softmax_cross_entropy(logits, onehot).tensor)
    assert got == pytest.approx(float(np.log1p(np.exp(-3.0))), rel=1e-12)


def test_gather_pad_index_reads_zero():
    x = ad.constant(np.array([3.0, 5.0, 7.0]))
    out = ad.gather(x, np.array([2, -1, 0]))
    np.testing.assert_array_equal(out.value, np.float32([7.0, 0.0, 3.0]))


def test_gather_scatter_adjoint_identity():
    # <gather(x, idx), y> == <x, scatter_add(y, idx)>: the pair is adjoint
    g = np.random.Generator(np.random.PCG64(7))
    x0 = g.standard_normal(9)
    idx = g.integers(-1, 9, size=14)
    y0 = g.standard_normal(14)
    lhs = float(np.dot(ad.gather(ad.constant(x0, F64), idx).value, y0))
    rhs = float(np.dot(x0, ad.scatter_add(ad.constant(y0, F64), idx, (9,)).value))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_conv2d_matches_direct_convolution():
    g = np.random.Generator(np.random.PCG64(3))
    x = g.standard_normal((2, 3, 5, 5))
    w = g.standard_normal((4, 3, 3, 3))
    got = ad.conv2d_3x3(ad.constant(x, F64), ad.constant(w, F64)).value
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    want = np.zeros((2, 4, 5, 5))
    for o in range(4):
        for i in range(5):
            for j in range(5):
                want[:, o, i, j] = np.sum(xp[:, :, i:i + 3, j:j + 3] * w[o], axis=(1, 2, 3))
    np.testing.assert_allclose(got, want, atol=1e-10)


def test_avgpool_matches_direct_mean():
    g = np.random.Generator(np.random.PCG64(4))
    x = g.standard_normal((2, 3, 6, 4))
    got = ad.avgpool_2x2(ad.constant(x, F64)).value
    want = x.reshape(2, 3, 3, 2, 2, 2).mean(axis=(3, 5))
    np.testing.assert_allclose(got, want, atol=1e-12)


# ---------------------------------------------------------------------------
# nesting: the backward pass emits differentiable nodes


def test_second_derivative_of_cube():
    x = ad.leaf(np.asarray(2.0))
    y = ad.mul(ad.mul(x, x), x)
    (g1,) = ad.gradient(y, [x])               # 3 x^2
    (g2,) = ad.gradient(g1, [x])              # 6 x
    assert float(g2.tensor) == pytest.approx(12.0, rel=1e-5)


@pytest.mark.parametrize("x0", [-2.0, 0.5, 3.0])
def test_second_derivative_of_quartic(x0):
    x = ad.leaf(np.asarray(x0, dtype=F64))
    x2 = ad.mul(x, x)
    y = ad.mul(x2, x2)
    (g1,) = ad.gradient(y, [x])
    (g2,) = ad.gradient(g1, [x])
    assert float(g2.tensor) == pytest.approx(12.0 * x0 * x0, rel=1e-4)


def test_third_derivative_of_quartic():
    x = ad.leaf(np.asarray(1.5, dtype=F64))
    x2 = ad.mul(x, x)
    (g1,) = ad.gradient(ad.mul(x2, x2), [x])
    (g2,) = ad.gradient(g1, [x])
    (g3,) = ad.gradient(g2, [x])
    assert float(g3.tensor) == pytest.approx(24.0 * 1.5, rel=1e-6)


def test_gradient_with_respect_to_interior_node():
    # ask for d/dy where y is itself an expression: paths below y stay frozen
    x = ad.leaf(np.asarray([1.0, 2.0], dtype=F64))
    y = ad.mul(x, x)
    c = ad.constant(np.asarray([3.0, 4.0], dtype=F64))
    z = ad.sum_sq(ad.mul(y, c))
    (gy,) = ad.gradient(z, [y])
    np.testing.assert_allclose(gy.value, 2.0 * (c.value ** 2) * y.value, rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 999))
def test_gradient_linearity(a, b, seed):
    x0 = rnd(seed, 6)
    c0 = rnd(seed + 1, 6)
    x = ad.leaf(x0)
    f = ad.sum_sq(x)
    g = ad.sum_all(ad.mul(x, ad.constant(c0)))
    combo = ad.add(ad.scale(f, a), ad.scale(g, b))
    (gc,) = ad.gradient(combo, [x])
    (gf,) = ad.gradient(f, [x])
    (gg,) = ad.gradient(g, [x])
    np.testing.assert_allclose(gc.value, a * gf.value + b * gg.value, atol=1e-5)


def test_gradient_at_minimum_is_zero():
    x0 = rnd(11, 5)
    x = ad.leaf(x0)
    y = ad.sum_sq(ad.sub(x, ad.constant(x0)))
    (g,) = ad.gradient(y, [x])
    np.testing.assert_array_equal(g.value, np.zeros(5))


def test_gradient_accumulates_over_reused_leaf():
    # x used twice: contributions from both paths must add
    x = ad.leaf(np.asarray([2.0], dtype=F64))
    y = ad.add(ad.mul(x, x), ad.scale(x, 3.0))  # x^2 + 3x
    (g,) = ad.gradient(ad.sum_all(y), [x])
    assert float(g.tensor) == pytest.approx(7.0)


# ---------------------------------------------------------------------------
# error contracts


def test_shape_mismatch_names_shapes():
    a = ad.leaf(np.zeros((2, 3)))
    b = ad.leaf(np.zeros((3, 2)))
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(3, 2\)"):
        ad.add(a, b)


def test_nonfinite_rejected():
    with pytest.raises(NonFiniteError):
        ad.Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        ad.leaf(np.array([np.inf]))
    # constants skip the check on construction; primitive_apply must still catch
    with pytest.raises(NonFiniteError):
        ad.primitive_apply("sum_sq", [ad.Node("const", (), np.array([np.nan], dtype=np.float32))])


def test_gradient_root_must_be_scalar():
    x = ad.leaf(np.zeros((2, 2)))
    with pytest.raises(GraphError, match="scalar"):
        ad.gradient(ad.mul(x, x), [x])


def test_gradient_rejects_detached_leaf():
    x = ad.leaf(np.zeros(3))
    other = ad.leaf(np.zeros(3))
    with pytest.raises(GraphError, match="not part"):
        ad.gradient(ad.sum_sq(x), [other])


def test_unknown_primitive_rejected():
    with pytest.raises(GraphError, match="unknown primitive"):
        ad.primitive_apply("conv2d-5x5", [ad.leaf(np.zeros((1, 1, 4, 4)))])


def test_mixed_dtype_graph_rejected():
    a = ad.leaf(np.zeros(3), dtype=np.float32)
    b = ad.leaf(np.zeros(3), dtype=np.float64)
    with pytest.raises(ShapeError, match="dtype"):
        ad.add(a, b)


def test_cross_entropy_rejects_bad_target_rows():
    logits = ad.leaf(np.zeros((2, 3)))
    bad = ad.constant(np.full((2, 3), 0.5))
    with pytest.raises(ShapeError, match="sum to 1"):
        ad.softmax_cross_entropy(logits, bad)


def test_finite_difference_rejects_bad_eps():
    with pytest.raises(ValueError, match="eps"):
        ad.finite_difference(lambda t: 0.0, ad.Tensor([1.0]), eps=0.0)


# ---------------------------------------------------------------------------
# seeded sampling


def test_rng_tensor_deterministic_per_seed():
    a = ad.rng_tensor((4, 5), "normal", seed=123)
    b = ad.rng_tensor((4, 5), "normal", seed=123)
    c = ad.rng_tensor((4, 5), "normal", seed=124)
    np.testing.assert_array_equal(a.array, b.array)
    assert not np.array_equal(a.array, c.array)


def test_rng_tensor_normal_mean():
    t = ad.rng_tensor((100_000,), "normal", seed=0)
    assert abs(float(t.array.mean())) < 0.02


def test_rng_tensor_uniform_range():
    t = ad.rng_tensor((50_000,), "uniform", seed=5)
    a = t.array
    assert a.min() >= 0.0 and a.max() < 1.0
    assert abs(float(a.mean()) - 0.5) < 0.02


def test_rng_tensor_unknown_distribution():
    with pytest.raises(ValueError, match="distribution"):
        ad.rng_tensor((3,), "poisson", seed=0)


def test_tensor_is_immutable():
    t = ad.Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.array[0] = 9.0
