"""Tensor engine: forward oracles, backward vs finite differences, guards."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdseg.tensor import (ConfigError, DimensionError, NumericError, Tensor,
                          backward, bilinear_matrix, concat, conv2d, crop2d,
                          global_pool, linear, no_grad, split,
                          upsample_bilinear, upsample_nearest2x)

from conftest import finite_difference


# ---------------------------------------------------------------- oracles


def conv2d_loop_oracle(x, w, b=None, stride=1, padding=0, groups=1):
    """Direct quadruple-loop cross-correlation; the reference for conv2d."""
    n, cin, h, wd = x.shape
    cout, cpg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    y = np.zeros((n, cout, ho, wo), dtype=x.dtype)
    cog = cout // groups
    for ni in range(n):
        for co in range(cout):
            gi = co // cog
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for ci in range(cpg):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += (w[co, ci, ky, kx]
                                        * xp[ni, gi * cpg + ci,
                                             oy * stride + ky, ox * stride + kx])
                    y[ni, co, oy, ox] = acc
    if b is not None:
        y += b.reshape(1, cout, 1, 1)
    return y


def upsample_bilinear_oracle(x, oh, ow):
    """Per-pixel bilinear with half-pixel centres and clamped edges."""
    n, c, h, w = x.shape
    out = np.zeros((n, c, oh, ow), dtype=x.dtype)
    for oy in range(oh):
        sy = min(max((oy + 0.5) * h / oh - 0.5, 0.0), h - 1.0)
        y0 = min(int(np.floor(sy)), h - 2) if h > 1 else 0
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for ox in range(ow):
            sx = min(max((ox + 0.5) * w / ow - 0.5, 0.0), w - 1.0)
            x0 = min(int(np.floor(sx)), w - 2) if w > 1 else 0
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            top = x[:, :, y0, x0] * (1 - fx) + x[:, :, y0, x1] * fx
            bot = x[:, :, y1, x0] * (1 - fx) + x[:, :, y1, x1] * fx
            out[:, :, oy, ox] = top * (1 - fy) + bot * fy
    return out


def t64(arr, rg=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=rg)


# ------------------------------------------------------------ construction


def test_leaf_dtype_defaults_to_f32():
    t = Tensor([1.0, 2.0])
    assert t.dtype == np.float32
    t = Tensor(np.zeros((2, 2), dtype=np.float64))
    assert t.dtype == np.float64


def test_rank_and_size_guards():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((1, 1, 1, 1, 1)))
    with pytest.raises(DimensionError):
        Tensor(np.zeros((0, 3)))
    with pytest.raises(NumericError):
        Tensor([np.nan, 1.0])
    with pytest.raises(ConfigError):
        Tensor(np.zeros(3, dtype=np.int64), dtype=np.int64)


def test_grad_present_iff_requires_grad():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.ones((2, 2)))
    (a * b).sum().backward()
    assert a.grad is not None
    assert b.grad is None


# ------------------------------------------------------------- elementwise


def test_add_broadcast_and_unbroadcast_grads():
    a = t64(np.random.default_rng(0).normal(size=(2, 3, 4, 4)))
    r = t64(np.random.default_rng(1).normal(size=(1, 3, 1, 1)))
    out = (a + r).sum()
    out.backward()
    assert np.allclose(a.grad, 1.0)
    assert np.allclose(r.grad, 2 * 4 * 4)


def test_mixed_dtype_rejected():
    a = Tensor(np.ones(3, dtype=np.float32))
    b = Tensor(np.ones(3, dtype=np.float64))
    with pytest.raises(ConfigError):
        a + b


def test_non_broadcastable_rejected():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((2, 4)))
    with pytest.raises(DimensionError):
        a + b


def test_div_by_zero_raises_numeric():
    a = Tensor(np.ones(3, dtype=np.float32))
    z = Tensor(np.array([1.0, 0.0, 2.0], dtype=np.float32))
    with pytest.raises(NumericError):
        a / z


def test_log_of_nonpositive_raises():
    with pytest.raises(NumericError):
        Tensor(np.array([1.0, -1.0])).log()


def test_exp_overflow_raises():
    with pytest.raises(NumericError):
        Tensor(np.array([1000.0], dtype=np.float32)).exp()


def test_sigmoid_extremes_stay_finite():
    t = Tensor(np.array([-500.0, 0.0, 500.0], dtype=np.float64)).sigmoid()
    assert np.allclose(t.data, [0.0, 0.5, 1.0])


def test_relu_zero_input_zero_grad():
    a = t64([-1.0, 0.0, 2.0])
    a.relu().sum().backward()
    assert np.array_equal(a.grad, [0.0, 0.0, 1.0])


def test_repeated_backward_accumulates():
    a = t64([2.0, 3.0])
    loss = (a * a).sum()
    loss.backward()
    g1 = a.grad.copy()
    loss.backward()
    assert np.allclose(a.grad, 2 * g1)


def test_two_graphs_accumulate_into_leaf():
    a = t64([1.0, 2.0])
    (a * 3.0).sum().backward()
    (a * 2.0).sum().backward()
    assert np.allclose(a.grad, 5.0)


def test_shared_node_diamond_grad():
    a = t64([1.5])
    b = a * 2.0
    out = (b * b).sum()
    out.backward()
    assert np.allclose(a.grad, 2 * 2.0 * 2.0 * 1.5)


def test_backward_requires_scalar():
    a = t64(np.ones((2, 2)))
    with pytest.raises(DimensionError):
        backward(a * 2.0)


def test_no_grad_blocks_graph():
    a = t64(np.ones(4))
    with no_grad():
        out = (a * 2.0).sum()
    assert not out.requires_grad
    assert out._backward is None


# ------------------------------------------------------------------- conv


@pytest.mark.parametrize("case", [
    dict(n=1, cin=3, cout=4, h=8, w=8, k=3, stride=1, padding=1, groups=1),
    dict(n=2, cin=3, cout=2, h=7, w=9, k=3, stride=2, padding=1, groups=1),
    dict(n=1, cin=3, cout=3, h=8, w=8, k=5, stride=1, padding=2, groups=3),
    dict(n=1, cin=4, cout=6, h=6, w=6, k=1, stride=1, padding=0, groups=2),
    dict(n=1, cin=2, cout=2, h=9, w=7, k=3, stride=2, padding=0, groups=1),
])
def test_conv2d_matches_loop_oracle(case):
    rng = np.random.default_rng(7)
    x = rng.normal(size=(case["n"], case["cin"], case["h"], case["w"]))
    w = rng.normal(size=(case["cout"], case["cin"] // case["groups"],
                         case["k"], case["k"]))
    b = rng.normal(size=(case["cout"],))
    want = conv2d_loop_oracle(x, w, b, case["stride"], case["padding"], case["groups"])
    got = conv2d(t64(x), t64(w), t64(b), stride=case["stride"],
                 padding=case["padding"], groups=case["groups"])
    assert got.shape == want.shape
    assert np.allclose(got.data, want, atol=1e-12)


def test_conv2d_depthwise_shape_example():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(1, 3, 8, 8)).astype(np.float32))
    w = Tensor(rng.normal(size=(3, 1, 5, 5)).astype(np.float32))
    assert conv2d(x, w, stride=1, padding=2, groups=3).shape == (1, 3, 8, 8)


def test_conv2d_backward_matches_fd():
    rng = np.random.default_rng(3)
    x = t64(rng.normal(size=(2, 3, 6, 5)))
    w = t64(rng.normal(size=(4, 3, 3, 3)))
    b = t64(rng.normal(size=(4,)))
    mask = Tensor(rng.normal(size=(2, 4, 3, 3)).astype(np.float64))

    def fn():
        return (conv2d(x, w, b, stride=2, padding=1) * mask).sum()

    want_x, want_w, want_b = finite_difference(fn, [x, w, b])
    for t in (x, w, b):
        t.grad = None
    fn().backward()
    assert np.allclose(x.grad, want_x, atol=1e-7)
    assert np.allclose(w.grad, want_w, atol=1e-7)
    assert np.allclose(b.grad, want_b, atol=1e-7)


def test_conv2d_remainder_rows_get_zero_input_grad():
    # with stride 2 on a 5-wide input and k=2, the last column never
    # contributes to any output
    x = t64(np.random.default_rng(0).normal(size=(1, 1, 5, 5)))
    w = t64(np.random.default_rng(1).normal(size=(1, 1, 2, 2)))
    conv2d(x, w, stride=2).sum().backward()
    assert np.all(x.grad[:, :, :, 4] == 0)
    assert np.all(x.grad[:, :, 4, :] == 0)


def test_conv2d_guards():
    x = Tensor(np.ones((1, 3, 8, 8)))
    w = Tensor(np.ones((4, 3, 3, 3)))
    with pytest.raises(ConfigError):
        conv2d(x, w, groups=2)
    with pytest.raises(DimensionError):
        conv2d(x, Tensor(np.ones((4, 2, 3, 3))))
    with pytest.raises(DimensionError):
        conv2d(x, Tensor(np.ones((4, 3, 11, 11))))
    with pytest.raises(DimensionError):
        conv2d(x, w, b=Tensor(np.ones((5,))))


@settings(max_examples=25, deadline=None)
@given(st.integers(4, 10), st.integers(4, 10), st.integers(1, 3),
       st.integers(1, 3), st.integers(1, 2), st.integers(0, 2),
       st.integers(1, 3), st.data())
def test_conv2d_oracle_property(h, w, cin, cout, stride, padding, k, data):
    if k > h + 2 * padding or k > w + 2 * padding:
        return
    rng = np.random.default_rng(data.draw(st.integers(0, 2**31)))
    x = rng.normal(size=(1, cin, h, w))
    wt = rng.normal(size=(cout, cin, k, k))
    want = conv2d_loop_oracle(x, wt, None, stride, padding, 1)
    got = conv2d(t64(x, rg=False), t64(wt, rg=False), stride=stride, padding=padding)
    assert np.allclose(got.data, want, atol=1e-10)


# ------------------------------------------------------- pool / linear etc


def test_global_pool_oracle():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 3, 4, 5))
    assert np.allclose(global_pool(t64(x), "max").data,
                       x.max(axis=(2, 3), keepdims=True))
    assert np.allclose(global_pool(t64(x), "avg").data,
                       x.mean(axis=(2, 3), keepdims=True))
    with pytest.raises(ConfigError):
        global_pool(t64(x), "median")


def test_global_pool_max_routes_to_first_max():
    x = t64(np.array([[[[1.0, 3.0], [3.0, 0.0]]]]))
    global_pool(x, "max").sum().backward()
    assert np.array_equal(x.grad[0, 0], [[0.0, 1.0], [0.0, 0.0]])


def test_global_pool_backward_fd():
    x = t64(np.random.default_rng(1).normal(size=(1, 2, 3, 3)) * 3)

    def fn():
        return (global_pool(x, "max") * 2.0).sum() + global_pool(x, "avg").sum()

    (want,) = finite_difference(fn, [x])
    x.grad = None
    fn().backward()
    assert np.allclose(x.grad, want, atol=1e-7)


def test_linear_oracle_and_fd():
    rng = np.random.default_rng(2)
    x = t64(rng.normal(size=(3, 5)))
    w = t64(rng.normal(size=(4, 5)))
    b = t64(rng.normal(size=(4,)))
    out = linear(x, w, b)
    assert np.allclose(out.data, x.data @ w.data.T + b.data)

    def fn():
        return (linear(x, w, b) * 0.5).sum()

    wants = finite_difference(fn, [x, w, b])
    for t in (x, w, b):
        t.grad = None
    fn().backward()
    for t, want in zip((x, w, b), wants):
        assert np.allclose(t.grad, want, atol=1e-7)


def test_concat_split_roundtrip_and_grads():
    rng = np.random.default_rng(9)
    a = t64(rng.normal(size=(1, 2, 3, 3)))
    b = t64(rng.normal(size=(1, 5, 3, 3)))
    joined = concat([a, b], axis=1)
    assert joined.shape == (1, 7, 3, 3)
    pa, pb = split(joined, [2, 5], axis=1)
    assert np.array_equal(pa.data, a.data)
    assert np.array_equal(pb.data, b.data)
    (pb.sum() * 2.0).backward()
    assert np.allclose(b.grad, 2.0)
    assert np.allclose(a.grad, 0.0)
    with pytest.raises(DimensionError):
        split(joined, [3, 5], axis=1)
    with pytest.raises(DimensionError):
        concat([a, t64(np.ones((1, 2, 4, 3)))], axis=1)


def test_crop2d_and_grads():
    x = t64(np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4))
    c = crop2d(x, 2, 3)
    assert np.array_equal(c.data, x.data[:, :, :2, :3])
    c.sum().backward()
    assert x.grad.sum() == 6
    assert np.all(x.grad[:, :, 2:, :] == 0)
    assert crop2d(x, 4, 4) is x


def test_upsample_nearest2x():
    x = t64(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    up = upsample_nearest2x(x)
    want = np.array([[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]],
                    dtype=np.float64)
    assert np.array_equal(up.data[0, 0], want)
    up.sum().backward()
    assert np.allclose(x.grad, 4.0)


def test_upsample_bilinear_matches_oracle():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(1, 2, 5, 7))
    for oh, ow in [(10, 14), (8, 8), (3, 4), (15, 5)]:
        want = upsample_bilinear_oracle(x, oh, ow)
        got = upsample_bilinear(t64(x, rg=False), oh, ow)
        assert np.allclose(got.data, want, atol=1e-12), (oh, ow)


def test_upsample_bilinear_same_size_is_identity_object():
    x = t64(np.random.default_rng(0).normal(size=(1, 1, 4, 4)))
    assert upsample_bilinear(x, 4, 4) is x


def test_upsample_bilinear_backward_fd():
    x = t64(np.random.default_rng(8).normal(size=(1, 1, 4, 5)))
    mask = Tensor(np.random.default_rng(9).normal(size=(1, 1, 7, 9)).astype(np.float64))

    def fn():
        return (upsample_bilinear(x, 7, 9) * mask).sum()

    (want,) = finite_difference(fn, [x])
    x.grad = None
    fn().backward()
    assert np.allclose(x.grad, want, atol=1e-7)


def test_bilinear_matrix_rows_sum_to_one():
    for n_out, n_in in [(3, 7), (7, 3), (1, 5), (5, 1), (8, 8)]:
        m = bilinear_matrix(n_out, n_in, np.float64)
        assert np.allclose(m.sum(axis=1), 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 12), st.integers(1, 12))
def test_bilinear_preserves_constants(h, w, oh, ow):
    x = Tensor(np.full((1, 1, h, w), 3.25, dtype=np.float64))
    out = upsample_bilinear(x, oh, ow)
    assert np.allclose(out.data, 3.25, atol=1e-12)


def test_sum_axis_keepdims_variants():
    x = t64(np.random.default_rng(0).normal(size=(2, 3, 4, 4)))
    assert x.sum(axis=(0, 2, 3)).shape == (3,)
    assert x.sum(axis=1, keepdims=True).shape == (2, 1, 4, 4)
    assert x.sum().shape == ()
    x.sum(axis=(0, 2, 3)).sum().backward()
    assert np.allclose(x.grad, 1.0)


def test_finite_guard_names_op():
    big = Tensor(np.array([1e300], dtype=np.float64), requires_grad=True)
    with pytest.raises(NumericError, match="mul"):
        big * big
