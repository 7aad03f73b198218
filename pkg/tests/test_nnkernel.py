import math

import numpy as np
import pytest

from olconvnet import nnkernel as nk
from olconvnet import gradcheck as gc
from olconvnet.errors import ArgumentError, DimensionError


def conv_oracle(x, w, b, padding):
    """Direct nested-loop cross-correlation on a single [H, W, C] image."""
    kh, kw, cin, cout = w.shape
    if padding == "same":
        x = np.pad(x, ((kh // 2, kh // 2), (kw // 2, kw // 2), (0, 0)))
    ho, wo = x.shape[0] - kh + 1, x.shape[1] - kw + 1
    y = np.zeros((ho, wo, cout))
    for i in range(ho):
        for j in range(wo):
            for o in range(cout):
                acc = float(b[o])
                for p in range(kh):
                    for q in range(kw):
                        for c in range(cin):
                            acc += float(x[i + p, j + q, c]) * float(w[p, q, c, o])
                y[i, j, o] = acc
    return y


def test_conv_scalar_affine():
    spec = nk.LayerSpec.conv(1, 1, 1, 1)
    y = nk.conv2d_forward(np.array([[[2.0]]]), spec, np.full((1, 1, 1, 1), 3.0), np.array([1.0]))
    assert y.shape == (1, 1, 1)
    assert y[0, 0, 0] == 7.0


def test_conv_paper_shape():
    spec = nk.LayerSpec.conv(5, 5, 3, 100)
    x = np.zeros((27, 27, 3), dtype=np.float32)
    w, b = nk.glorot_uniform(np.random.default_rng(0), spec)
    assert nk.conv2d_forward(x, spec, w, b).shape == (23, 23, 100)


@pytest.mark.parametrize("padding", ["valid", "same"])
def test_conv_matches_loop_oracle(padding):
    rng = np.random.default_rng(1)
    spec = nk.LayerSpec.conv(3, 3, 2, 4, padding)
    x = rng.standard_normal((6, 6, 2))
    w = rng.standard_normal(spec.weight_shape)
    b = rng.standard_normal(4)
    ref = conv_oracle(x, w, b, padding)
    np.testing.assert_allclose(nk.conv2d_forward(x, spec, w, b), ref, rtol=0, atol=1e-12)
    y32 = nk.conv2d_forward(x.astype(np.float32), spec, w.astype(np.float32), b.astype(np.float32))
    assert y32.dtype == np.float32
    assert np.max(np.abs(y32 - ref)) < 1e-5


def test_conv_shape_errors():
    spec = nk.LayerSpec.conv(5, 5, 3, 2)
    w, b = nk.glorot_uniform(np.random.default_rng(0), spec)
    with pytest.raises(DimensionError) as exc:
        nk.conv2d_forward(np.zeros((4, 8, 3)), spec, w, b)
    assert exc.value.axes == ("H",)
    with pytest.raises(DimensionError):
        nk.conv2d_forward(np.zeros((8, 8, 2)), spec, w, b)
    with pytest.raises(DimensionError):
        nk.conv2d_forward(np.zeros((8, 8, 3)), spec, w[:, :, :2], b)


def test_conv_backward_zero_grad():
    rng = np.random.default_rng(2)
    spec = nk.LayerSpec.conv(3, 3, 2, 3, "same")
    x = rng.standard_normal((5, 5, 2))
    w = rng.standard_normal(spec.weight_shape)
    gx, gw, gb = nk.conv2d_backward(x, spec, w, np.zeros((5, 5, 3)))
    assert not gx.any() and not gw.any() and not gb.any()


def test_conv_backward_scalar_chain_rule():
    spec = nk.LayerSpec.conv(1, 1, 1, 1)
    x = np.array([[[2.5]]])
    gx, gw, gb = nk.conv2d_backward(x, spec, np.array([[[[3.0]]]]), np.array([[[4.0]]]))
    assert gw.item() == 2.5 * 4.0
    assert gx.item() == 3.0 * 4.0
    assert gb.item() == 4.0


@pytest.mark.parametrize("padding", ["valid", "same"])
def test_conv_backward_finite_diff(padding):
    rng = np.random.default_rng(3)
    assert gc.check_conv(rng, 5, 5, 1, 2, 3, padding) < 1e-4
    assert gc.check_conv(rng, 6, 5, 3, 2, 3, padding) < 1e-4


def test_relu():
    np.testing.assert_array_equal(nk.relu_forward(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    g = nk.relu_backward(np.array([-1.0, 0.0, 2.0]), np.array([5.0, 5.0, 5.0]))
    np.testing.assert_array_equal(g, [0, 0, 5])
    assert gc.check_relu(np.random.default_rng(4)) < 1e-4


def test_maxpool_trivial():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])[:, :, None]
    y, amap = nk.maxpool_forward(x, 2, 1)
    assert y.shape == (1, 1, 1) and y[0, 0, 0] == 4.0
    g = nk.maxpool_backward(amap, np.ones((1, 1, 1)))
    np.testing.assert_array_equal(g[:, :, 0], [[0, 0], [0, 1]])


def test_maxpool_paper_shape():
    y, _ = nk.maxpool_forward(np.zeros((23, 23, 100), dtype=np.float32), 2, 1)
    assert y.shape == (22, 22, 100)
    assert y.size == 48400


def test_maxpool_tie_first_in_row_major():
    x = np.full((2, 2, 1), 7.0)
    _, amap = nk.maxpool_forward(x, 2, 1)
    assert amap.index.ravel().tolist() == [0]


def test_maxpool_overlap_accumulates():
    # a single global max is the argmax of all four overlapping windows
    x = np.zeros((3, 3, 1))
    x[1, 1, 0] = 9.0
    _, amap = nk.maxpool_forward(x, 2, 1)
    g = nk.maxpool_backward(amap, np.ones((2, 2, 1)))
    assert g[1, 1, 0] == 4.0 and g.sum() == 4.0


def test_maxpool_window_too_big():
    with pytest.raises(DimensionError):
        nk.maxpool_forward(np.zeros((2, 5, 1)), 3, 1)


@pytest.mark.parametrize("stride", [1, 2])
def test_maxpool_finite_diff_and_mass(stride):
    rng = np.random.default_rng(5)
    assert gc.check_maxpool(rng, 6, 6, 2, 2, stride) < 1e-4
    x = rng.permutation(72).astype(float).reshape(6, 6, 2)
    y, amap = nk.maxpool_forward(x, 2, stride)
    r = rng.standard_normal(y.shape)
    assert math.isclose(nk.maxpool_backward(amap, r).sum(), r.sum(), rel_tol=1e-12, abs_tol=1e-12)


def test_dense():
    x = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(nk.dense_forward(x, np.eye(3), np.zeros(3)), x)
    b = np.array([0.5, 1.5])
    np.testing.assert_array_equal(nk.dense_forward(np.zeros(3), np.ones((3, 2)), b), b)
    with pytest.raises(DimensionError):
        nk.dense_forward(np.zeros(4), np.ones((3, 2)), b)
    assert gc.check_dense(np.random.default_rng(6)) < 1e-4


def test_tansig():
    assert nk.tansig(0.0) == 0.0
    # closed form evaluated in extended precision: 2/(1+e^-1) - 1
    import mpmath
    ref = float(2 / (1 + mpmath.e ** -1) - 1)
    assert abs(nk.tansig(0.5) - 0.46212) < 1e-5
    assert abs(nk.tansig(0.5) - ref) < 1e-15
    assert abs(nk.tansig(20.0) - 1) < 1e-6
    assert np.all(np.abs(nk.tansig(np.linspace(-50, 50, 101))) <= 1)
    assert gc.check_tansig(np.random.default_rng(7)) < 1e-4


def test_softmax():
    np.testing.assert_allclose(nk.softmax(np.zeros(4)), [0.25] * 4)
    for c in (-1000.0, 3.0, 1e4):
        np.testing.assert_allclose(nk.softmax(np.full(4, c)), [0.25] * 4)
    import mpmath
    e = [mpmath.e ** v for v in (1, 2, 3)]
    ref = [float(v / sum(e)) for v in e]
    np.testing.assert_allclose(nk.softmax(np.array([1.0, 2.0, 3.0])), ref, rtol=1e-14)
    with pytest.raises(DimensionError):
        nk.softmax(np.array([1.0]))


def test_softmax_properties():
    rng = np.random.default_rng(8)
    s = rng.standard_normal((200, 4)) * 10
    p = nk.softmax(s)
    assert np.all(np.abs(p.sum(axis=1) - 1) < 1e-6)
    assert np.all(p >= 0)
    assert np.array_equal(p.argmax(axis=1), s.argmax(axis=1))
    np.testing.assert_allclose(nk.softmax(s + 17.0), p, atol=1e-12)


def test_cross_entropy():
    assert nk.cross_entropy(np.array([0.0, 1.0, 0.0, 0.0]), 2) == 0.0
    assert math.isclose(nk.cross_entropy(np.full(4, 0.25), 3), math.log(4))
    assert math.isclose(nk.cross_entropy(np.array([1.0, 0.0]), 2), -math.log(1e-12))
    with pytest.raises(ArgumentError):
        nk.cross_entropy(np.full(4, 0.25), 5)
    with pytest.raises(ArgumentError):
        nk.cross_entropy(np.full(4, 0.25), 0)
    assert gc.check_softmax_xent(np.random.default_rng(9)) < 1e-4


def test_sgd_step():
    w = np.array([1.0, 2.0])
    np.testing.assert_array_equal(nk.sgd_step(w, np.zeros(2), 0.1), w)
    assert nk.sgd_step(np.array([1.0]), np.array([2.0]), 0.5)[0] == 0.0
    with pytest.raises(DimensionError):
        nk.sgd_step(w, np.zeros(3), 0.1)


def test_sgd_quadratic_converges():
    # f(w) = (w - 3)^2 / 2, gradient w - 3; error contracts by (1 - lr) per step
    w = np.array([10.0])
    for _ in range(200):
        w = nk.sgd_step(w, w - 3.0, 0.1)
    assert abs(w[0] - 3.0) < 7.0 * 0.9**200 + 1e-12


def test_sgd_order_independent():
    rng = np.random.default_rng(10)
    ws = [rng.standard_normal(5) for _ in range(3)]
    gs = [rng.standard_normal(5) for _ in range(3)]
    fwd = [nk.sgd_step(w, g, 0.01) for w, g in zip(ws, gs)]
    rev = [nk.sgd_step(w, g, 0.01) for w, g in reversed(list(zip(ws, gs)))][::-1]
    for a, b in zip(fwd, rev):
        assert np.array_equal(a, b)


def test_layerspec_validation():
    with pytest.raises(ArgumentError):
        nk.LayerSpec.conv(0, 3, 1, 1)
    with pytest.raises(ArgumentError):
        nk.LayerSpec.maxpool(2, 0)
    with pytest.raises(ArgumentError):
        nk.LayerSpec("pool")
    with pytest.raises(ArgumentError):
        nk.TrainConfig(batch_size=0)
