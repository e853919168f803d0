import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from minmax_wsl.autograd import (
    LOG_EPS,
    NonFiniteError,
    ShapeError,
    Tensor,
    bilinear_upsample,
    forward_op,
    grad_check,
    ops,
)


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# -- forward examples ----------------------------------------------------------


def test_relu_example():
    out = forward_op("relu", [Tensor([-1.0, 0.0, 2.0])])
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])


def test_softmax_symmetric():
    np.testing.assert_array_equal(ops.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_conv2d_all_ones_center():
    out = forward_op("conv2d", [Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3)))], padding=1)
    assert out.data[0, 0, 1, 1] == 9.0
    # corners see 4 valid taps, edges 6
    assert out.data[0, 0, 0, 0] == 4.0 and out.data[0, 0, 0, 1] == 6.0


def test_conv2d_matches_direct_loops():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = ops.conv2d(x, w, b, stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for n in range(2):
        for o in range(4):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    ref[n, o, i, j] = (xp[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o]).sum() + b[o]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_shape_mismatch_names_primitive_and_shapes():
    with pytest.raises(ShapeError, match=r"add.*\(2,\).*\(3,\)"):
        ops.add(Tensor(np.ones(2)), Tensor(np.ones(3)))
    with pytest.raises(ShapeError, match="conv2d"):
        ops.conv2d(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)))
    with pytest.raises(ShapeError, match="linear"):
        ops.linear(np.ones((2, 3)), np.ones((4, 5)))


def test_non_finite_rejected():
    with pytest.raises(NonFiniteError):
        ops.relu(Tensor([1.0, np.nan]))
    with pytest.raises(NonFiniteError):
        ops.exp(Tensor([np.inf]))


def test_forward_op_unknown_kind():
    with pytest.raises(ValueError, match="unknown primitive"):
        forward_op("fft", [Tensor([1.0])])


# -- backward --------------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = leaf(np.arange(6.0).reshape(2, 3))
    ops.sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_sigmoid_derivative_at_zero():
    x = leaf([0.0])
    ops.sum(ops.sigmoid(x)).backward()
    assert x.grad[0] == 0.25


def test_backward_accumulates_across_calls():
    x = leaf(np.ones((3, 2)))
    loss = ops.sum(x)
    loss.backward()
    loss.backward()
    np.testing.assert_array_equal(x.grad, np.full((3, 2), 2.0))


def test_backward_rejects_non_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(ShapeError, match="scalar"):
        ops.relu(x).backward()


def test_fan_out_sums_gradients():
    x = leaf([1.0, -2.0])
    y = ops.add(ops.mul(x, x), ops.affine(x, 3.0))
    ops.sum(y).backward()
    np.testing.assert_array_equal(x.grad, 2 * x.data + 3.0)


# -- grad_check examples ------------------------------------------------------------


def test_grad_check_square_sum():
    rep = grad_check(lambda t: ops.sum(ops.mul(t, t)), np.array([1.0, 2.0]), tol=1e-6)
    assert rep.passed, rep.message
    np.testing.assert_array_equal(rep.analytic, [2.0, 4.0])
    np.testing.assert_allclose(rep.numeric, [2.0, 4.0], atol=1e-6)


def test_grad_check_constant():
    rep = grad_check(lambda t: ops.sum(ops.affine(t, 0.0, 3.0)), np.array([0.3, -1.0]))
    assert rep.passed
    assert np.all(rep.analytic == 0) and np.all(rep.numeric == 0)


def test_grad_check_softmax_log_pipeline():
    x = np.random.default_rng(0).normal(size=4)
    w = np.array([0.1, -0.7, 0.3, 1.2])
    rep = grad_check(lambda t: ops.sum(ops.mul(ops.log(ops.softmax(t)), w)), x, tol=1e-4)
    assert rep.passed, rep.message


def test_grad_check_reports_wrong_gradient():
    # a primitive with a deliberately broken backward must fail the check
    from minmax_wsl.autograd.tensor import make_node

    def bad_square(t):
        return make_node(t.data**2, (t,), lambda g: (g * t.data,), "bad")

    rep = grad_check(lambda t: ops.sum(bad_square(t)), np.array([0.2, 3.0]))
    assert not rep.passed
    assert rep.worst_index == (1,)


def test_grad_check_non_finite_probe_fails_with_index():
    def f(t):
        if t.data[1] > 1.0:
            return Tensor(np.array(np.inf))
        return ops.sum(t)

    rep = grad_check(f, np.array([0.0, 1.0]), h=1e-5)
    assert not rep.passed
    assert rep.worst_index == (1,)


# -- every primitive passes grad_check on 5 seeds ---------------------------------------

SEEDS = range(5)


def _rand(rng, *shape):
    return rng.normal(size=shape)


def _weights(rng, shape):
    return rng.normal(size=shape)


def _case_conv2d(rng):
    n, c, h, w = 1 + rng.integers(2), 1 + rng.integers(3), 4 + rng.integers(4), 4 + rng.integers(4)
    o, stride, pad = 1 + rng.integers(3), 1 + rng.integers(2), rng.integers(2)
    x, wt, b = _rand(rng, n, c, h, w), _rand(rng, o, c, 3, 3), _rand(rng, o)
    u = None

    def f(t):
        nonlocal u
        y = ops.conv2d(t, wt, b, stride, pad)
        if u is None:
            u = _weights(rng, y.shape)
        return ops.sum(ops.mul(y, u))

    def g(t):
        y = ops.conv2d(x, t, b, stride, pad)
        return ops.sum(ops.mul(y, y))

    return [(f, x), (g, wt)]


def _case_linear(rng):
    n, i, o = 1 + rng.integers(4), 1 + rng.integers(5), 1 + rng.integers(4)
    x, w, b = _rand(rng, n, i), _rand(rng, o, i), _rand(rng, o)
    u = _weights(rng, (n, o))
    return [
        (lambda t: ops.sum(ops.mul(ops.linear(t, w, b), u)), x),
        (lambda t: ops.sum(ops.mul(ops.linear(x, t, b), u)), w),
        (lambda t: ops.sum(ops.mul(ops.linear(x, w, t), u)), b),
    ]


def _unary(fn, low=-2.0, high=2.0, avoid=None):
    def case(rng):
        shape = tuple(int(s) for s in 1 + rng.integers(4, size=1 + rng.integers(3)))
        x = rng.uniform(low, high, size=shape)
        if avoid is not None:
            x = np.where(np.abs(x - avoid) < 1e-2, x + 0.05, x)
        u = _weights(rng, shape)
        return [(lambda t: ops.sum(ops.mul(fn(t), u)), x)]

    return case


def _case_softmax(rng):
    shape = (1 + rng.integers(3), 2 + rng.integers(4))
    x, u = _rand(rng, *shape), _weights(rng, shape)
    return [(lambda t: ops.sum(ops.mul(ops.softmax(t), u)), x)]


def _binary(fn):
    def case(rng):
        shape = (1 + rng.integers(3), 1 + rng.integers(4))
        a, b = _rand(rng, *shape), _rand(rng, *shape)
        b = np.where(np.abs(a - b) < 1e-2, b + 0.1, b)
        u = _weights(rng, shape)
        return [
            (lambda t: ops.sum(ops.mul(fn(t, b), u)), a),
            (lambda t: ops.sum(ops.mul(fn(a, t), u)), b),
        ]

    return case


def _case_broadcast_mul(rng):
    x, m = _rand(rng, 2, 3, 4, 5), _rand(rng, 2, 1, 4, 5)
    return [
        (lambda t: ops.sum(ops.mul(ops.mul(x, t), x)), m),
        (lambda t: ops.sum(ops.mul(ops.mul(t, m), t)), x),
    ]


def _case_spatial_avg(rng):
    x = _rand(rng, 2, 1 + rng.integers(3), 3, 4)
    u = _weights(rng, x.shape[:2])
    return [(lambda t: ops.sum(ops.mul(ops.spatial_avg(t), u)), x)]


def _case_top_k(rng):
    n = 4 + rng.integers(10)
    x = rng.permutation(n).astype(float) * 0.3 + rng.uniform(0, 0.01, size=n)  # well-separated values
    k = 1 + rng.integers(n)
    return [
        (lambda t: ops.sum(ops.top_k_mean(ops.reshape(t, (1, n)), int(k), True)), x),
        (lambda t: ops.sum(ops.affine(ops.top_k_mean(ops.reshape(t, (1, n)), int(k), False), 2.0)), x),
    ]


def _case_upsample(rng):
    h, w = 1 + rng.integers(4), 1 + rng.integers(4)
    oh, ow = h + rng.integers(5), w + rng.integers(5)
    x = _rand(rng, 2, h, w)
    u = _weights(rng, (2, oh, ow))
    return [(lambda t: ops.sum(ops.mul(bilinear_upsample(t, int(oh), int(ow)), u)), x)]


def _case_reshape_concat(rng):
    a, b = _rand(rng, 2, 3), _rand(rng, 2, 2)
    u = _weights(rng, (5, 2))
    return [
        (lambda t: ops.sum(ops.mul(ops.reshape(ops.concat([t, b], axis=1), (5, 2)), u)), a),
        (lambda t: ops.sum(ops.mul(ops.reshape(ops.concat([a, t], axis=1), (5, 2)), u)), b),
    ]


def _case_dropout(rng):
    x = _rand(rng, 3, 4)
    keep = rng.random((3, 4)) >= 0.5
    u = _weights(rng, (3, 4))
    return [(lambda t: ops.sum(ops.mul(ops.dropout_apply(t, keep, 2.0), u)), x)]


def _case_affine_sum_mean(rng):
    x = _rand(rng, 3, 4)
    u = _weights(rng, (4,))
    return [
        (lambda t: ops.sum(ops.affine(t, -1.7, 0.4)), x),
        (lambda t: ops.sum(ops.mul(ops.sum(t, axis=0), u)), x),
        (lambda t: ops.sum(ops.mul(ops.mean(t, axis=0), u)), x),
    ]


def _case_pick(rng):
    p = _rand(rng, 4, 3)
    idx = rng.integers(3, size=4)
    u = _weights(rng, (4,))
    return [(lambda t: ops.sum(ops.mul(ops.pick(t, idx), u)), p)]


PRIMITIVE_CASES = {
    "conv2d": _case_conv2d,
    "linear": _case_linear,
    "relu": _unary(ops.relu, avoid=0.0),
    "sigmoid": _unary(ops.sigmoid, -4, 4),
    "log": _unary(ops.log, 0.1, 3.0),
    "exp": _unary(ops.exp),
    "softmax": _case_softmax,
    "add": _binary(ops.add),
    "mul": _binary(ops.mul),
    "max": _binary(ops.maximum),
    "mul-broadcast": _case_broadcast_mul,
    "scalar-affine/sum/mean": _case_affine_sum_mean,
    "spatial-avg": _case_spatial_avg,
    "top-k-mean": _case_top_k,
    "bilinear-upsample": _case_upsample,
    "reshape/concat": _case_reshape_concat,
    "dropout-mask-apply": _case_dropout,
    "pick": _case_pick,
}


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("kind", sorted(PRIMITIVE_CASES))
def test_primitive_grad_check(kind, seed):
    rng = np.random.default_rng(1000 + seed)
    for f, x in PRIMITIVE_CASES[kind](rng):
        rep = grad_check(f, x, tol=1e-4)
        assert rep.passed, f"{kind}: {rep.message}"


# -- invariants ----------------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(x):
    p = ops.softmax(Tensor(x)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-9)


def test_detached_upsample_gives_bitwise_zero_parent_grad():
    rng = np.random.default_rng(0)
    a = leaf(rng.normal(size=(3, 3)))
    mid = ops.mul(a, a)
    mid.retain_grad = True
    up = bilinear_upsample(mid, 6, 6, detach=True)
    assert up.detached and not up.requires_grad
    loss = ops.add(ops.sum(ops.mul(up, Tensor(np.ones((6, 6))))), ops.sum(a))
    loss.backward()
    assert np.array_equal(mid.grad, np.zeros((3, 3)))
    np.testing.assert_array_equal(a.grad, np.ones((3, 3)))


def test_accumulation_is_exactly_additive():
    rng = np.random.default_rng(1)
    x = leaf(rng.normal(size=(1, 2, 5, 5)))
    w = leaf(rng.normal(size=(3, 2, 3, 3)))

    def loss():
        return ops.sum(ops.log(ops.softmax(ops.reshape(ops.relu(ops.conv2d(x, w, None, 1, 1)), (1, -1)))))

    loss().backward()
    once_x, once_w = x.grad.copy(), w.grad.copy()
    x.zero_grad()
    w.zero_grad()
    loss().backward()
    loss().backward()
    assert np.array_equal(x.grad, 2 * once_x)
    assert np.array_equal(w.grad, 2 * once_w)


def test_log_clamp_never_returns_minus_inf():
    out = ops.log(Tensor([0.0, 1e-300, 1.0])).data
    assert np.all(np.isfinite(out))
    assert out[0] == np.log(LOG_EPS)
    assert -out[0] == pytest.approx(18.420680743952367)


def test_log_clamped_entries_have_zero_gradient():
    x = leaf([0.0, 0.5])
    ops.sum(ops.log(x)).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 2.0])


# -- bilinear upsampling ---------------------------------------------------------------


@pytest.mark.parametrize("size", [(1, 1), (3, 7), (16, 5)])
def test_upsample_constant_field(size):
    out = bilinear_upsample(Tensor([[2.5]]), *size)
    np.testing.assert_array_equal(out.data, np.full(size, 2.5))


def test_upsample_align_corners_example():
    out = bilinear_upsample(Tensor([[0.0, 1.0], [0.0, 1.0]]), 2, 4)
    np.testing.assert_allclose(out.data, [[0, 1 / 3, 2 / 3, 1]] * 2, rtol=0, atol=1e-15)


def test_upsample_batched_matches_per_map():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 4, 4))
    out = bilinear_upsample(Tensor(x), 9, 7).data
    for i in range(2):
        for j in range(3):
            np.testing.assert_allclose(out[i, j], bilinear_upsample(Tensor(x[i, j]), 9, 7).data, atol=1e-14)


def test_upsample_detach_zero_gradient():
    x = leaf([[1.0, 2.0], [3.0, 4.0]])
    ops.sum(ops.add(bilinear_upsample(x, 5, 5, detach=True), Tensor(np.zeros((5, 5))))).backward()
    assert np.array_equal(x.grad, np.zeros((2, 2)))


def test_upsample_rejects_zero_target():
    with pytest.raises(ShapeError):
        bilinear_upsample(Tensor(np.ones((2, 2))), 0, 4)
