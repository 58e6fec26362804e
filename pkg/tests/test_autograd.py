"""Autodiff engine tests: forward contracts, gradient oracles, determinism."""

import numpy as np
import pytest

from mtlwb.autograd import (
    Graph,
    GraphError,
    Parameter,
    backward,
    forward,
    grad_check,
)
from mtlwb.nn import BatchNormState


def finite_difference(loss_fn, param: Parameter, eps: float = 1e-5) -> np.ndarray:
    """Independent central-difference gradient of loss_fn w.r.t. param."""
    flat = param.value.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = loss_fn()
        flat[i] = orig - eps
        down = loss_fn()
        flat[i] = orig
        grad[i] = (up - down) / (2 * eps)
    return grad.reshape(param.value.shape)


def test_identity_graph():
    g = Graph()
    x = g.input("x")
    out = forward(g, {"x": np.array([1.0, 2.0, 3.0])}, [x])
    assert np.array_equal(out["x"], np.array([1, 2, 3], dtype=np.float32))


def test_relu_forward():
    g = Graph()
    x = g.input("x")
    r = g.relu("r", x)
    out = forward(g, {"x": np.array([-1.0, 0.0, 2.0])}, [r])
    assert np.array_equal(out[r], np.array([0, 0, 2], dtype=np.float32))


def test_one_by_one_conv_is_linear():
    # kernel value 2, zero bias, on a 1x1 "image" holding 3 -> 6
    g = Graph()
    x = g.input("x")
    w = Parameter("w", np.full((1, 1, 1, 1), 2.0, dtype=np.float32))
    c = g.conv2d("c", x, w)
    out = forward(g, {"x": np.full((1, 1, 1, 1), 3.0)}, [c])
    assert out[c].reshape(()) == pytest.approx(6.0)


def test_backward_product_rule():
    # loss = w . x with x = 3 -> dloss/dw = 3
    g = Graph(dtype=np.float64)
    x = g.input("x")
    w = Parameter("w", np.array([[1.5]]))
    z = g.matmul("z", x, w)
    loss = g.reduce_sum("loss", z)
    forward(g, {"x": np.array([[3.0]])})
    backward(g, loss)
    assert w.gradient[0, 0] == 3.0


def test_non_scalar_loss_rejected():
    g = Graph(dtype=np.float64)
    x = g.input("x")
    w = Parameter("w", np.array([[1.5], [-0.5]]))
    z = g.matmul("z", x, w)  # (1, 1) output, still not 0-d
    forward(g, {"x": np.array([[3.0, 2.0]])})
    with pytest.raises(GraphError):
        backward(g, z)


def test_scalar_product_gradient_vs_oracle():
    # loss = sum over CE of 2-logit row; verify dloss/dw matches finite diff
    rng = np.random.default_rng(0)
    x_val = rng.normal(size=(4, 3))
    w = Parameter("w", rng.normal(size=(3, 2)))

    def run(return_graph=False):
        g = Graph(dtype=np.float64)
        x = g.input("x")
        z = g.matmul("z", x, w)
        ce = g.softmax_cross_entropy("ce", z, [0, 1, 0, 1], reduction="sum")
        loss = g.scalar_combine("loss", [ce], [0.25])
        forward(g, {"x": x_val})
        if return_graph:
            return g, loss
        return float(g.value(loss))

    g, loss = run(return_graph=True)
    backward(g, loss)
    analytic = w.gradient.copy()
    numeric = finite_difference(run, w)
    assert np.abs(analytic - numeric).max() < 1e-8


def test_unreachable_parameter_gets_exact_zero():
    g = Graph(dtype=np.float64)
    x = g.input("x")
    w = Parameter("w", np.array([[1.0, -1.0], [0.5, 2.0]]))
    p = Parameter("p", np.array([[3.0, 3.0], [3.0, 3.0]]))
    z = g.matmul("z", x, w)
    dead = g.matmul("dead", x, p)  # never feeds the loss
    ce = g.softmax_cross_entropy("ce", z, [0, 1], reduction="sum")
    loss = g.scalar_combine("loss", [ce], [0.5])
    p.gradient[...] = 7.0  # stale garbage must be overwritten with zeros
    forward(g, {"x": np.eye(2)})
    backward(g, loss)
    assert np.all(p.gradient == 0.0)
    assert np.any(w.gradient != 0.0)


def test_backward_before_forward_errors():
    g = Graph()
    x = g.input("x")
    with pytest.raises(GraphError):
        backward(g, x)


def test_dimension_mismatch_names_node():
    g = Graph()
    x = g.input("x")
    w = Parameter("w", np.zeros((3, 2), dtype=np.float32))
    g.matmul("bad_mm", x, w)
    with pytest.raises(GraphError) as err:
        forward(g, {"x": np.zeros((4, 5))})
    assert "bad_mm" in str(err.value)


def _random_mlp_graph(rng, dtype=np.float64, n_layers=5):
    """A small random MLP ending in softmax cross-entropy, plus its params."""
    g = Graph(dtype=dtype)
    x = g.input("x")
    h = x
    dims = [6, 8, 7, 6, 5, 4][: n_layers + 1]
    params = []
    for i in range(n_layers):
        w = Parameter(f"w{i}", rng.normal(size=(dims[i], dims[i + 1])) * 0.7)
        b = Parameter(f"b{i}", rng.normal(size=(dims[i + 1],)) * 0.1)
        params.extend([w, b])
        h = g.matmul(f"mm{i}", h, w)
        h = g.add_bias(f"bias{i}", h, b)
        if i < n_layers - 1:
            h = g.relu(f"relu{i}", h)
    labels = rng.integers(0, dims[n_layers], size=3)
    ce = g.softmax_cross_entropy("ce", h, labels, reduction="sum")
    loss = g.scalar_combine("loss", [ce], [1.0 / 3.0])
    x_val = rng.normal(size=(3, dims[0]))
    return g, loss, x_val, params


def test_mlp_gradients_match_finite_differences():
    rng = np.random.default_rng(42)
    g, loss, x_val, params = _random_mlp_graph(rng)
    err = grad_check(g, {"x": x_val}, loss, eps=1e-5)
    assert err < 1e-4


def test_grad_check_linear_layer_tight():
    rng = np.random.default_rng(1)
    g = Graph(dtype=np.float64)
    x = g.input("x")
    w = Parameter("w", rng.normal(size=(5, 3)))
    b = Parameter("b", rng.normal(size=(3,)))
    z = g.add_bias("zb", g.matmul("z", x, w), b)
    ce = g.softmax_cross_entropy("ce", z, [0, 1, 2, 0], reduction="mean")
    err = grad_check(g, {"x": rng.normal(size=(4, 5))}, ce, eps=1e-5)
    assert err < 1e-6


def test_grad_check_conv_bn_relu_stack():
    rng = np.random.default_rng(2)
    g = Graph(dtype=np.float64)
    x = g.input("x")
    w = Parameter("w", rng.normal(size=(4, 3, 3, 3)) * 0.5)
    bn = BatchNormState.create("bn", 4, dtype=np.float64)
    bn.mode = "frozen"  # batch statistics without running-stat updates
    h = g.conv2d("conv", x, w, stride=2, pad=1)
    h = g.batchnorm("bn", h, bn)
    h = g.relu("relu", h)
    f = g.global_avg_pool("gap", h)
    hw = Parameter("hw", rng.normal(size=(4, 3)))
    z = g.matmul("z", f, hw)
    ce = g.softmax_cross_entropy("ce", z, [0, 2, 1, 0, 2], reduction="mean")
    err = grad_check(g, {"x": rng.normal(size=(5, 3, 8, 8))}, ce, eps=1e-5)
    assert err < 1e-4


def test_grad_check_softmax_head_tight():
    rng = np.random.default_rng(3)
    g = Graph(dtype=np.float64)
    x = g.input("x")
    w = Parameter("w", rng.normal(size=(6, 5)))
    b = Parameter("b", rng.normal(size=(5,)))
    z = g.add_bias("zb", g.matmul("z", x, w), b)
    ce = g.softmax_cross_entropy("ce", z, rng.integers(0, 5, size=8), reduction="sum")
    loss = g.scalar_combine("loss", [ce], [1 / 8])
    err = grad_check(g, {"x": rng.normal(size=(8, 6))}, loss, eps=1e-5)
    assert err < 1e-6


def test_grad_check_gather_and_combine():
    rng = np.random.default_rng(4)
    g = Graph(dtype=np.float64)
    x = g.input("x")
    w = Parameter("w", rng.normal(size=(4, 3)))
    z = g.matmul("z", x, w)
    za = g.gather_rows("za", z, [0, 2])
    zb = g.gather_rows("zb", z, [1, 3, 4])
    cea = g.softmax_cross_entropy("cea", za, [0, 1], reduction="sum")
    ceb = g.softmax_cross_entropy("ceb", zb, [2, 0, 1], reduction="sum")
    loss = g.scalar_combine("loss", [cea, ceb], [0.2, 0.2])
    err = grad_check(g, {"x": rng.normal(size=(5, 4))}, loss, eps=1e-5)
    assert err < 1e-6


@pytest.mark.parametrize("seed", range(20))
def test_randomized_primitive_gradients(seed):
    """Randomized conv/BN/pool/CE stacks against central differences."""
    rng = np.random.default_rng(1000 + seed)
    g = Graph(dtype=np.float64)
    x = g.input("x")
    cin = int(rng.integers(1, 4))
    cout = int(rng.integers(2, 5))
    n = int(rng.integers(2, 5))
    w = Parameter("w", rng.normal(size=(cout, cin, 3, 3)) * 0.6)
    stride = int(rng.integers(1, 3))
    h = g.conv2d("conv", x, w, stride=stride, pad=1)
    if seed % 2 == 0:
        bn = BatchNormState.create("bn", cout, dtype=np.float64)
        bn.mode = "frozen"
        h = g.batchnorm("bn", h, bn)
    else:
        b = Parameter("b", rng.normal(size=(cout,)) * 0.2)
        h = g.add_bias("cb", h, b)
    h = g.relu("relu", h)
    f = g.global_avg_pool("gap", h)
    classes = int(rng.integers(2, 5))
    hw = Parameter("hw", rng.normal(size=(cout, classes)))
    hb = Parameter("hb", rng.normal(size=(classes,)) * 0.1)
    z = g.add_bias("zb", g.matmul("z", f, hw), hb)
    ce = g.softmax_cross_entropy("ce", z, rng.integers(0, classes, size=n), reduction="mean")
    err = grad_check(g, {"x": rng.normal(size=(n, cin, 6, 6))}, ce, eps=1e-5)
    assert err < 1e-4


def test_forward_backward_bitwise_deterministic():
    rng = np.random.default_rng(7)
    x_val = rng.normal(size=(3, 6))

    def run():
        r = np.random.default_rng(99)
        g = Graph(dtype=np.float32)
        x = g.input("x")
        w = Parameter("w", r.normal(size=(6, 4)).astype(np.float32))
        z = g.matmul("z", x, w)
        ce = g.softmax_cross_entropy("ce", z, [0, 1, 2], reduction="mean")
        forward(g, {"x": x_val})
        backward(g, ce)
        return g.value(ce).copy(), w.gradient.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert l1.tobytes() == l2.tobytes()
    assert g1.tobytes() == g2.tobytes()


def test_conv_stride_and_pad_shapes():
    g = Graph()
    x = g.input("x")
    w = Parameter("w", np.zeros((8, 3, 3, 3), dtype=np.float32))
    c = g.conv2d("c", x, w, stride=2, pad=1)
    out = forward(g, {"x": np.zeros((2, 3, 16, 16))}, [c])
    assert out[c].shape == (2, 8, 8, 8)


def test_gap_shape_and_value():
    g = Graph()
    x = g.input("x")
    p = g.global_avg_pool("p", x)
    arr = np.arange(2 * 3 * 2 * 2, dtype=np.float32).reshape(2, 3, 2, 2)
    out = forward(g, {"x": arr}, [p])
    assert out[p].shape == (2, 3)
    assert out[p][0, 0] == pytest.approx(arr[0, 0].mean())
