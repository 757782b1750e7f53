import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from denodet import autodiff as ad
from denodet.autodiff import ShapeError, Tape, TapeError, Tensor, grad_check


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def conv_loop_oracle(x, w, b):
    """Six nested loops, zero padding for 3x3."""
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    p = k // 2
    out = np.zeros((n, cout, h, wd))
    for s in range(n):
        for o in range(cout):
            for i in range(h):
                for j in range(wd):
                    acc = b[o]
                    for c in range(cin):
                        for di in range(k):
                            for dj in range(k):
                                ii, jj = i + di - p, j + dj - p
                                if 0 <= ii < h and 0 <= jj < wd:
                                    acc += x[s, c, ii, jj] * w[o, c, di, dj]
                    out[s, o, i, j] = acc
    return out


def bilinear_oracle(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, 2 * h, 2 * w))
    for i in range(2 * h):
        for j in range(2 * w):
            sy = min(max((i + 0.5) / 2 - 0.5, 0), h - 1)
            sx = min(max((j + 0.5) / 2 - 0.5, 0), w - 1)
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            out[..., i, j] = (
                (1 - fy) * (1 - fx) * x[..., y0, x0] + (1 - fy) * fx * x[..., y0, x1]
                + fy * (1 - fx) * x[..., y1, x0] + fy * fx * x[..., y1, x1]
            )
    return out


# --- tensors and tape -------------------------------------------------------

def test_integer_data_becomes_float32():
    assert Tensor([1, 2, 3]).dtype == np.float32


def test_sum_gives_ones_and_square_gives_2x(rng):
    x = t64(rng.standard_normal((3, 4)))
    with Tape() as tape:
        y = x.sum()
    tape.backward(y)
    assert np.array_equal(x.grad, np.ones((3, 4)))

    x2 = t64(rng.standard_normal((3, 4)))
    with Tape() as tape:
        y = (x2 * x2).sum()
    tape.backward(y)
    np.testing.assert_allclose(x2.grad, 2 * x2.data)


def test_backward_rejects_non_scalar_root():
    x = t64(np.ones((2, 2)))
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(TapeError):
        tape.backward(y)


def test_second_backward_rejected_until_reset():
    x = t64(np.ones(3))
    with Tape() as tape:
        y = x.sum()
    tape.backward(y)
    with pytest.raises(TapeError):
        tape.backward(y)
    tape.reset()
    with tape:
        y2 = (x * 3.0).sum()
    tape.backward(y2)


def test_tape_is_topological_and_released_after_backward():
    x = t64(np.ones(4))
    with Tape() as tape:
        a = x * 2.0
        b = ad.exp(a)
        c = b.sum()
    nodes = [op.output.node for op in tape.ops]
    assert nodes == sorted(nodes)
    for op in tape.ops:
        for inp in op.inputs:
            assert inp.node is None or inp.node < op.output.node
    tape.backward(c)
    assert len(tape) == 0


def test_input_from_other_tape_rejected():
    x = t64(np.ones(2))
    with Tape():
        y = x * 2.0
    with Tape():
        with pytest.raises(TapeError):
            _ = y * 3.0


def test_leaf_gradients_accumulate_across_graphs():
    x = t64(np.ones(2))
    for _ in range(2):
        with Tape() as tape:
            y = (x * 3.0).sum()
        tape.backward(y)
    assert np.array_equal(x.grad, [6.0, 6.0])


def test_unused_requiring_tensor_gets_zero_grad():
    x, z = t64(np.ones(2)), t64(np.ones(3))
    with Tape() as tape:
        y = (x * 2.0).sum()
        _ = z * 1.0  # recorded but not on the path to y
    tape.backward(y)
    assert np.array_equal(z.grad, np.zeros(3))


def test_no_grad_records_nothing():
    x = t64(np.ones(2))
    with Tape() as tape, ad.no_grad():
        y = (x * 2.0).sum()
    assert len(tape) == 0 and not y.requires_grad


def test_replay_is_bit_identical(rng):
    x0 = rng.standard_normal((1, 2, 6, 6))
    w0 = rng.standard_normal((3, 2, 3, 3))

    def run():
        x, w = t64(x0), t64(w0)
        with Tape() as tape:
            y = ad.tsum(ad.relu(ad.conv2d(x, w)) ** 2)
        tape.backward(y)
        return x.grad.tobytes(), w.grad.tobytes()

    assert run() == run()


def test_float32_is_preserved_through_ops(rng):
    x = Tensor(rng.standard_normal((1, 2, 4, 4)).astype(np.float32), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 2, 3, 3)).astype(np.float32), requires_grad=True)
    y = ad.instance_norm(ad.conv2d(x, w), Tensor(np.ones(2, np.float32)), Tensor(np.zeros(2, np.float32)))
    assert y.dtype == np.float32


# --- conv2d -----------------------------------------------------------------

def test_conv_identity_kernel():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1
    out = ad.conv2d(t64(x), t64(w), t64([0.0]))
    assert np.array_equal(out.data, x)


def test_conv_zero_input_gives_bias(rng):
    b = np.array([0.5, -2.0])
    out = ad.conv2d(t64(np.zeros((2, 3, 5, 4))), t64(rng.standard_normal((2, 3, 3, 3))), t64(b))
    assert np.all(out.data[:, 0] == 0.5) and np.all(out.data[:, 1] == -2.0)


@pytest.mark.parametrize("k", [1, 3])
@pytest.mark.parametrize("shape", [(1, 2, 4, 4), (2, 3, 5, 7), (1, 1, 1, 1), (1, 2, 2, 9)])
def test_conv_matches_nested_loop_oracle(rng, k, shape):
    x = rng.standard_normal(shape)
    w = rng.standard_normal((3, shape[1], k, k))
    b = rng.standard_normal(3)
    out = ad.conv2d(t64(x), t64(w), t64(b))
    np.testing.assert_allclose(out.data, conv_loop_oracle(x, w, b), atol=1e-5)


def test_conv_float32_matches_oracle(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3))
    out = ad.conv2d(Tensor(x.astype(np.float32)), Tensor(w.astype(np.float32)))
    np.testing.assert_allclose(out.data, conv_loop_oracle(x, w, np.zeros(3)), atol=1e-5)


def test_conv_shape_errors(rng):
    with pytest.raises(ShapeError):
        ad.conv2d(t64(np.zeros((1, 2, 4, 4))), t64(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ShapeError):
        ad.conv2d(t64(np.zeros((1, 2, 4, 4))), t64(np.zeros((1, 2, 5, 5))))


# --- instance norm ----------------------------------------------------------

def test_instance_norm_constant_channel_is_zero():
    out = ad.instance_norm(t64(np.full((1, 1, 3, 3), 4.2)), t64([1.0]), t64([0.0]))
    assert np.allclose(out.data, 0.0)


@given(arrays(np.float64, (2, 3, 4, 4), elements=st.floats(-50, 50)))
def test_instance_norm_standardizes(x):
    x = x + np.linspace(0, 1, 16).reshape(4, 4)  # keep every channel non-constant
    out = ad.instance_norm(t64(x), t64(np.ones(3)), t64(np.zeros(3))).data
    assert np.allclose(out.mean(axis=(2, 3)), 0, atol=1e-5)
    var = x.var(axis=(2, 3))
    expected = var / (var + 1e-5)
    assert np.allclose(out.var(axis=(2, 3)), expected, atol=1e-9)
    assert np.all(np.abs(out.var(axis=(2, 3)) - 1) < 1e-3 + 1e-5 / var.min())


def test_instance_norm_gradient(rng):
    rep = grad_check(lambda x, s, b: (ad.instance_norm(x, s, b) * np.arange(18.0).reshape(1, 2, 3, 3)).sum(),
                     [t64(rng.standard_normal((1, 2, 3, 3))), t64(rng.standard_normal(2)), t64(rng.standard_normal(2))])
    assert rep.passed and rep.max_rel_error < 1e-4


def test_instance_norm_rejects_single_pixel():
    with pytest.raises(ShapeError):
        ad.instance_norm(t64(np.ones((1, 1, 1, 1))), t64([1.0]), t64([0.0]))


# --- relu, sigmoid, softmax -------------------------------------------------

def test_relu_values_and_subgradient_at_zero():
    x = t64([-1.0, 0.0, 2.0])
    with Tape() as tape:
        y = ad.relu(x)
        s = y.sum()
    assert np.array_equal(y.data, [0, 0, 2])
    tape.backward(s)
    assert np.array_equal(x.grad, [0, 0, 1])


def test_relu_all_negative():
    x = t64(-np.ones(4))
    with Tape() as tape:
        y = ad.relu(x).sum()
    tape.backward(y)
    assert y.item() == 0 and not x.grad.any()


def test_sigmoid_stable():
    with np.errstate(over="raise"):
        out = ad.sigmoid(t64([0.0, -80.0, 80.0, -1000.0])).data
    assert out[0] == 0.5 and 0 <= out[1] < 1e-30 and out[2] == 1.0 and out[3] == 0.0


def test_softmax_uniform_and_one_hot():
    assert np.allclose(ad.softmax2d(t64(np.full((3, 4), 2.0))).data, 1 / 12)
    x = np.zeros((5, 5))
    x[2, 3] = 1000.0
    out = ad.softmax2d(t64(x)).data
    assert abs(out[2, 3] - 1) < 1e-6 and out.sum() - out[2, 3] < 1e-6


@given(arrays(np.float64, (2, 3, 5), elements=st.floats(-300, 300)))
def test_softmax_is_distribution(x):
    out = ad.softmax2d(t64(x)).data
    assert np.all(out >= 0)
    assert np.allclose(out.sum(axis=(-2, -1)), 1, atol=1e-6)


# --- maxpool, upsample, concat ---------------------------------------------

def test_maxpool_basic_and_odd_rejected():
    assert ad.maxpool2(t64([[[[1.0, 2.0], [3.0, 4.0]]]])).data.item() == 4.0
    with pytest.raises(ShapeError):
        ad.maxpool2(t64(np.zeros((1, 1, 3, 4))))


def test_maxpool_ties_route_to_top_left():
    x = t64(np.full((1, 1, 4, 4), 7.0))
    with Tape() as tape:
        y = ad.maxpool2(x)
        s = y.sum()
    assert np.all(y.data == 7.0)
    tape.backward(s)
    expected = np.zeros((4, 4))
    expected[::2, ::2] = 1
    assert np.array_equal(x.grad[0, 0], expected)


def test_maxpool_matches_block_scan(rng):
    x = rng.standard_normal((1, 1, 6, 6))
    oracle = np.array([[x[0, 0, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].max() for j in range(3)] for i in range(3)])
    assert np.array_equal(ad.maxpool2(t64(x)).data[0, 0], oracle)


def test_upsample_constants_and_single_pixel():
    assert np.all(ad.upsample_bilinear2(t64(np.full((1, 2, 3, 2), 3.5))).data == 3.5)
    assert np.all(ad.upsample_bilinear2(t64([[[[9.0]]]])).data == 9.0)


def test_upsample_matches_interpolation_oracle(rng):
    x = rng.standard_normal((2, 1, 3, 3))
    np.testing.assert_allclose(ad.upsample_bilinear2(t64(x)).data, bilinear_oracle(x), atol=1e-12)
    x = rng.standard_normal((1, 2, 2, 5))
    np.testing.assert_allclose(ad.upsample_bilinear2(t64(x)).data, bilinear_oracle(x), atol=1e-12)
    rep = grad_check(lambda a: (ad.upsample_bilinear2(a) ** 2).sum(), t64(rng.standard_normal((1, 1, 3, 3))))
    assert rep.max_rel_error < 1e-4


def test_concat_order_identity_and_split(rng):
    a, b = t64(rng.standard_normal((1, 2, 3, 3))), t64(rng.standard_normal((1, 3, 3, 3)))
    g = rng.standard_normal((1, 5, 3, 3))
    with Tape() as tape:
        c = ad.concat_channels([a, b])
        s = (c * g).sum()
    assert np.array_equal(c.data[:, :2], a.data) and np.array_equal(c.data[:, 2:], b.data)
    tape.backward(s)
    assert np.array_equal(a.grad, g[:, :2]) and np.array_equal(b.grad, g[:, 2:])
    assert np.array_equal(ad.concat_channels([a]).data, a.data)
    with pytest.raises(ShapeError):
        ad.concat_channels([a, t64(np.zeros((1, 1, 4, 3)))])


# --- windows ----------------------------------------------------------------

def test_extract_windows_gathers_and_scatters(rng):
    x = t64(rng.standard_normal((2, 1, 8, 8)))
    with Tape() as tape:
        w = ad.extract_windows(x, [1, 1], [0, 1], [2, 2], 3)
        s = w.sum()
    assert np.array_equal(w.data[0], x.data[1, 0, 0:3, 2:5])
    tape.backward(s)
    assert x.grad[1, 0, 1, 3] == 2.0  # covered by both windows
    assert x.grad[0].sum() == 0.0
    with pytest.raises(ShapeError):
        ad.extract_windows(x, [0], [6], [0], 3)
    padded = ad.extract_windows(x, [0], [-1], [-1], 3, fill=-5.0).data[0]
    assert padded[0, 0] == -5.0 and padded[1, 1] == x.data[0, 0, 0, 0]


# --- gradient checker -------------------------------------------------------

def test_grad_check_linear_and_quadratic(rng):
    a = rng.standard_normal(5)
    lin = grad_check(lambda x: (x * a).sum(), t64(rng.standard_normal(5)))
    assert lin.max_rel_error < 1e-9
    quad = grad_check(lambda x: (x * x * a).sum(), t64(rng.standard_normal(5)))
    assert quad.max_rel_error < 1e-7


def test_grad_check_reports_non_finite():
    with np.errstate(invalid="ignore"):  # log(-1) is the point of the test
        rep = grad_check(lambda x: ad.log(x).sum(), t64([-1.0, 2.0]))
    assert not rep.passed and not rep.finite


def test_flipped_backward_is_detected(rng):
    x = t64(rng.standard_normal((1, 1, 4, 4)))
    w = t64(rng.standard_normal((1, 1, 3, 3)))
    assert grad_check(lambda a, b: (ad.conv2d(a, b) ** 2).sum(), [x, w]).passed
    with ad.flip_backward("conv2d"):
        assert not grad_check(lambda a, b: (ad.conv2d(a, b) ** 2).sum(), [x, w]).passed


def test_kink_crossings_are_skipped_not_hidden():
    # 1e-6 sits within the step of the relu kink: the central difference is 0.5
    x = t64([1e-6, 1.0])
    f = lambda a: ad.relu(a).sum()  # noqa: E731
    assert not grad_check(f, x).passed
    rep = grad_check(f, x, skip_kinks=True)
    assert rep.passed and rep.n_kinks == 1 and rep.n_checked == 1
