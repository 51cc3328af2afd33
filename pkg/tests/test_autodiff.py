import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from festaseg import autodiff as ad
from festaseg.autodiff import Tensor, gradcheck
from festaseg.errors import GraphError, ParameterError, ShapeError, UsageError

from conftest import t64


def naive_conv(x, k, b):
    h, w, _ = x.shape
    r = k.shape[0] // 2
    xp = np.pad(x, ((r, r), (r, r), (0, 0)))
    out = np.zeros((h, w, k.shape[3]))
    for i in range(h):
        for j in range(w):
            for o in range(k.shape[3]):
                out[i, j, o] = (xp[i:i + k.shape[0], j:j + k.shape[1], :] * k[:, :, :, o]).sum() + b[o]
    return out


def naive_upsample(x, f):
    h, w, c = x.shape
    out = np.zeros((h * f, w * f, c))
    for p in range(h * f):
        for q in range(w * f):
            y = min(max((p + 0.5) / f - 0.5, 0), h - 1)
            xx = min(max((q + 0.5) / f - 0.5, 0), w - 1)
            y0, x0 = int(np.floor(y)), int(np.floor(xx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = y - y0, xx - x0
            out[p, q] = ((1 - fy) * (1 - fx) * x[y0, x0] + (1 - fy) * fx * x[y0, x1]
                         + fy * (1 - fx) * x[y1, x0] + fy * fx * x[y1, x1])
    return out


# -- conv2d ----------------------------------------------------------------------

def test_conv_single_pixel_all_ones_kernel():
    out = ad.conv2d(Tensor([[[1.0]]]), Tensor(np.ones((3, 3, 1, 1))), Tensor(np.zeros(1)))
    assert out.data.tolist() == [[[1.0]]]


def test_conv_identity_kernel(rng):
    x = rng.normal(size=(5, 4, 3))
    k = np.zeros((3, 3, 3, 3))
    for c in range(3):
        k[1, 1, c, c] = 1
    out = ad.conv2d(t64(x), t64(k), t64(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_2x2_all_ones():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])[..., None]
    out = ad.conv2d(t64(x), t64(np.ones((3, 3, 1, 1))), t64(np.zeros(1)))
    # every padded 3x3 window covers the whole 2x2 input
    assert out.data[..., 0].tolist() == [[10.0, 10.0], [10.0, 10.0]]


@pytest.mark.parametrize("ksize", [1, 3])
def test_conv_matches_direct_summation(rng, ksize):
    x = rng.normal(size=(6, 5, 3))
    k = rng.normal(size=(ksize, ksize, 3, 4))
    b = rng.normal(size=4)
    out = ad.conv2d(t64(x), t64(k), t64(b))
    np.testing.assert_allclose(out.data, naive_conv(x, k, b), atol=1e-12)


def test_conv_batched_equals_per_image(rng):
    x = rng.normal(size=(3, 4, 4, 2))
    k, b = rng.normal(size=(3, 3, 2, 5)), rng.normal(size=5)
    batched = ad.conv2d(t64(x), t64(k), t64(b)).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], naive_conv(x[i], k, b), atol=1e-12)


def test_conv_linearity(rng):
    x = rng.normal(size=(4, 4, 2))
    k = rng.normal(size=(3, 3, 2, 3))
    zero = t64(np.zeros(3))
    a = 2.5
    lhs = ad.conv2d(t64(a * x), t64(k), zero).data
    rhs = a * ad.conv2d(t64(x), t64(k), zero).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        ad.conv2d(Tensor(np.zeros((4, 4, 2))), Tensor(np.zeros((3, 3, 3, 1))), Tensor(np.zeros(1)))


def test_conv_bad_kernel_size():
    with pytest.raises(ShapeError):
        ad.conv2d(Tensor(np.zeros((4, 4, 2))), Tensor(np.zeros((5, 5, 2, 1))), Tensor(np.zeros(1)))


# -- maxpool2 ----------------------------------------------------------------------

def test_maxpool_basic():
    assert ad.maxpool2(Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])[..., None])).data.ravel().tolist() == [4.0]
    assert ad.maxpool2(Tensor(np.array([[-1.0, -2.0], [-3.0, -4.0]])[..., None])).data.ravel().tolist() == [-1.0]


def test_maxpool_ties_route_to_top_left():
    x = t64(np.full((4, 4, 1), 7.0))
    out = ad.maxpool2(x)
    assert np.all(out.data == 7.0)
    ad.sum(out).backward()
    expected = np.zeros((4, 4))
    expected[0::2, 0::2] = 1
    np.testing.assert_array_equal(x.grad[..., 0], expected)


def test_maxpool_outputs_come_from_window(rng):
    x = rng.integers(-3, 3, size=(6, 8, 2)).astype(float)
    out = ad.maxpool2(t64(x)).data
    for i in range(3):
        for j in range(4):
            win = x[2 * i:2 * i + 2, 2 * j:2 * j + 2]
            np.testing.assert_array_equal(out[i, j], win.reshape(4, 2).max(axis=0))


def test_maxpool_odd_dims():
    with pytest.raises(ShapeError):
        ad.maxpool2(Tensor(np.zeros((3, 4, 1))))


# -- relu / add ------------------------------------------------------------------

def test_relu_examples():
    assert ad.relu(Tensor([-1.0, 2.0])).data.tolist() == [0.0, 2.0]
    assert ad.relu(Tensor([5.0])).data.tolist() == [5.0]
    x = t64(np.zeros(4))
    out = ad.relu(x)
    assert np.all(out.data == 0)
    ad.sum(out).backward()
    assert np.all(x.grad == 0)


def test_add_examples():
    a = t64([1.0, 2.0])
    out = ad.add(a, t64([3.0, 4.0]))
    assert out.data.tolist() == [4.0, 6.0]
    np.testing.assert_array_equal(ad.add(a, Tensor(np.zeros(2))).data, a.data)
    ad.sum(out).backward()
    assert a.grad.tolist() == [1.0, 1.0]


def test_add_dim_mismatch():
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))


# -- upsample_bilinear -------------------------------------------------------------

def test_upsample_single_pixel_is_constant():
    out = ad.upsample_bilinear(Tensor(np.array([[[3.5]]])), 4)
    assert out.shape == (4, 4, 1)
    assert np.all(out.data == 3.5)


def test_upsample_half_pixel_example():
    out = ad.upsample_bilinear(t64(np.array([[0.0, 2.0]])[..., None]), 2)
    np.testing.assert_allclose(out.data[0, :, 0], [0.0, 0.5, 1.5, 2.0], atol=1e-15)
    np.testing.assert_allclose(out.data[1, :, 0], [0.0, 0.5, 1.5, 2.0], atol=1e-15)


@pytest.mark.parametrize("factor", [2, 4, 8])
def test_upsample_matches_pointwise_formula(rng, factor):
    x = rng.normal(size=(3, 4, 2))
    np.testing.assert_allclose(ad.upsample_bilinear(t64(x), factor).data, naive_upsample(x, factor), atol=1e-12)


def test_upsample_constant_stays_constant():
    out = ad.upsample_bilinear(t64(np.full((3, 5, 2), -1.25)), 8)
    np.testing.assert_allclose(out.data, -1.25, atol=1e-14)


@pytest.mark.parametrize("factor", [1, 3, 16])
def test_upsample_rejects_factor(factor):
    with pytest.raises(ParameterError):
        ad.upsample_bilinear(Tensor(np.zeros((2, 2, 1))), factor)


# -- tape ------------------------------------------------------------------------

def test_backward_replays_in_reverse_order():
    x = t64([1.0, -2.0, 3.0])
    y = ad.relu(ad.scale(x, 2.0))
    z = ad.sum(ad.mul(y, y))
    trace = z.backward()
    assert trace == ["sum", "mul", "relu", "scale"]


def test_second_backward_rejected():
    x = t64([1.0, 2.0])
    z = ad.sum(ad.mul(x, x))
    z.backward()
    with pytest.raises(GraphError):
        z.backward()


def test_backward_needs_scalar_or_seed():
    x = t64([1.0, 2.0])
    with pytest.raises(UsageError):
        ad.scale(x, 2.0).backward()


def test_grads_populated_and_shaped(rng):
    x = t64(rng.normal(size=(4, 4, 2)))
    k = t64(rng.normal(size=(3, 3, 2, 3)))
    b = t64(rng.normal(size=3))
    ad.sum(ad.conv2d(x, k, b)).backward()
    for t in (x, k, b):
        assert t.grad is not None and t.grad.shape == t.shape


def test_shared_input_accumulates():
    x = t64([3.0])
    ad.sum(ad.add(ad.mul(x, x), x)).backward()
    assert x.grad.tolist() == [7.0]


def test_no_grad_records_nothing():
    x = t64([1.0])
    with ad.no_grad():
        y = ad.scale(x, 2.0)
    assert not y.requires_grad


def test_backward_is_bit_deterministic(rng):
    x = rng.normal(size=(8, 8, 3)).astype(np.float32)
    k = rng.normal(size=(3, 3, 3, 4)).astype(np.float32)
    grads = []
    for _ in range(2):
        xt, kt = Tensor(x, requires_grad=True), Tensor(k, requires_grad=True)
        out = ad.maxpool2(ad.relu(ad.conv2d(xt, kt, Tensor(np.zeros(4, np.float32)))))
        ad.sum(ad.upsample_bilinear(out, 2)).backward()
        grads.append((xt.grad.tobytes(), kt.grad.tobytes()))
    assert grads[0] == grads[1]


def test_float32_default_and_float64_kept():
    assert Tensor([1, 2]).dtype == np.float32
    assert Tensor(np.zeros(2)).dtype == np.float64


# -- gradcheck --------------------------------------------------------------------

def test_gradcheck_conv(rng):
    x = t64(rng.normal(size=(4, 4, 2)))
    k = t64(rng.normal(size=(3, 3, 2, 3)))
    b = t64(rng.normal(size=3))
    w = rng.normal(size=(4, 4, 3))
    rep = gradcheck(lambda x, k, b: ad.sum(ad.mul(ad.conv2d(x, k, b), t64(w, False))), [x, k, b])
    assert rep.ok and rep.worst <= 1e-4


def test_gradcheck_relu_away_from_zero(rng):
    v = rng.uniform(0.1, 1.0, size=12) * rng.choice([-1, 1], size=12)
    w = rng.normal(size=12)
    rep = gradcheck(lambda x: ad.sum(ad.mul(ad.relu(x), t64(w, False))), [t64(v)], tolerance=1e-6)
    assert rep.worst <= 1e-6


def test_gradcheck_upsample_linear(rng):
    x = t64(rng.normal(size=(2, 3, 2)))
    w = rng.normal(size=(8, 12, 2))
    rep = gradcheck(lambda x: ad.sum(ad.mul(ad.upsample_bilinear(x, 4), t64(w, False))), [x], tolerance=1e-6)
    assert rep.worst <= 1e-6


@pytest.mark.parametrize("name", ["add", "sub", "mul", "div", "scale", "clamp_min", "sum_axis", "mean",
                                  "reshape", "take", "norm", "log_softmax", "maxpool2"])
def test_gradcheck_elementary_ops(rng, name):
    a = t64(rng.normal(size=(4, 3)))
    b = t64(rng.uniform(0.5, 2.0, size=(4, 3)))
    w = t64(rng.normal(size=(4, 3)), False)
    fns = {
        "add": lambda a, b: ad.sum(ad.mul(ad.add(a, b), w)),
        "sub": lambda a, b: ad.sum(ad.mul(ad.sub(a, b), w)),
        "mul": lambda a, b: ad.sum(ad.mul(ad.mul(a, b), w)),
        "div": lambda a, b: ad.sum(ad.mul(ad.div(a, b), w)),
        "scale": lambda a, b: ad.sum(ad.mul(ad.scale(a, -1.7), w)),
        "clamp_min": lambda a, b: ad.sum(ad.mul(ad.clamp_min(b, 1.0), w)),
        "sum_axis": lambda a, b: ad.sum(ad.mul(ad.sum(a, axis=1), t64([1.0, -2.0, 0.5, 3.0], False))),
        "mean": lambda a, b: ad.mean(ad.mul(a, b)),
        "reshape": lambda a, b: ad.sum(ad.mul(ad.reshape(ad.reshape(a, (12,)), (4, 3)), w)),
        "take": lambda a, b: ad.sum(ad.take(ad.mul(a, w), np.array([0, 2, 2, 3]))),
        "norm": lambda a, b: ad.sum(ad.mul(ad.norm(a), t64([1.0, 2.0, -1.0, 0.5], False))),
        "log_softmax": lambda a, b: ad.sum(ad.mul(ad.log_softmax(a), w)),
        "maxpool2": lambda a, b: ad.sum(ad.maxpool2(ad.reshape(a, (2, 2, 3)))),
    }
    if name == "clamp_min":
        # keep every coordinate away from the kink
        b.data[np.abs(b.data - 1.0) < 0.05] += 0.2
    rep = gradcheck(fns[name], [a, b])
    assert rep.ok, (name, rep.max_rel_error)


def test_gradcheck_rejects_vector_output():
    with pytest.raises(UsageError):
        gradcheck(lambda x: ad.scale(x, 2.0), [t64([1.0, 2.0])])


def test_gradcheck_reports_a_wrong_gradient():
    def bad(x):
        out = ad.sum(ad.mul(x, x))
        if out._node is not None:  # no node under no_grad
            out._node.adjoint = lambda g: (g * 3.0,)  # wrong on purpose
        return out
    rep = gradcheck(bad, [t64([1.0, 2.0])])
    assert not rep.ok


@settings(max_examples=25, deadline=None)
@given(h=st.integers(1, 6), factor=st.sampled_from([2, 4, 8]))
def test_interpolation_rows_are_convex(h, factor):
    # every row of the interpolation matrix is a convex combination
    m = ad.bilinear_matrix(h, factor)
    np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-14)
    assert (m >= 0).all()
