import math

import numpy as np
import pytest

from budgetforge.errors import NumericError, ShapeError, StateError, IngestionError
from budgetforge.nn import (
    AdamW,
    DenseNet,
    Layer,
    backprop,
    dense_forward,
    finite_diff_grad,
    load_checkpoint,
    optimizer_step,
    relative_error,
    save_checkpoint,
)


def scalar_forward(layers, x):
    """Loop-by-loop re-evaluation, independent of the kernels."""
    h = list(x)
    for w, b, act in layers:
        out = []
        for j in range(len(b)):
            z = b[j]
            for k in range(len(h)):
                z += w[j][k] * h[k]
            if act == "relu":
                z = z if z > 0 else 0.0
            elif act == "sigmoid":
                z = 1.0 / (1.0 + math.exp(-z))
            out.append(z)
        h = out
    return h


def test_identity_layer():
    net = DenseNet([Layer(np.eye(2), np.zeros(2), "identity")])
    np.testing.assert_array_equal(dense_forward(net, [1.0, 2.0]), [1.0, 2.0])


def test_relu_layer():
    net = DenseNet([Layer(np.eye(2), np.zeros(2), "relu")])
    np.testing.assert_array_equal(dense_forward(net, [-1.0, 3.0]), [0.0, 3.0])


def test_two_layer_matches_scalar_oracle():
    w1 = [[0.5, -0.25, 0.1], [0.3, 0.2, -0.4]]
    b1 = [0.05, -0.1]
    w2 = [[1.5, -0.7]]
    b2 = [0.2]
    net = DenseNet([Layer(w1, b1, "relu"), Layer(w2, b2, "sigmoid")])
    x = [0.9, -1.2, 0.4]
    expected = scalar_forward([(w1, b1, "relu"), (w2, b2, "sigmoid")], x)
    np.testing.assert_allclose(dense_forward(net, x), expected, rtol=0, atol=1e-15)


def test_forward_shape_error():
    net = DenseNet.build([3, 2], ["relu"], rng=0)
    with pytest.raises(ShapeError):
        net.forward([1.0, 2.0])


def test_layers_must_chain():
    with pytest.raises(ShapeError):
        DenseNet([Layer(np.zeros((2, 3)), np.zeros(2)), Layer(np.zeros((1, 3)), np.zeros(1))])


def test_forward_is_pure_and_bitwise_repeatable():
    net = DenseNet.build([4, 8, 1], ["relu", "identity"], rng=1)
    before = net.get_flat()
    x = np.random.default_rng(2).normal(size=(5, 4))
    a, b = net(x), net(x)
    assert a.tobytes() == b.tobytes()
    assert before.tobytes() == net.get_flat().tobytes()


def test_parameter_count_and_init_bounds():
    net = DenseNet.build([6, 10, 1], ["relu", "identity"], rng=3)
    assert net.parameter_count == 6 * 10 + 10 + 10 + 1
    s = math.sqrt(6 / 16)
    assert np.all(np.abs(net.layers[0].weight) <= s)
    assert np.all(net.layers[0].bias == 0)


def test_backprop_scalar_linear_squared_error():
    w, b, x, target = 0.7, 0.1, 2.0, 1.0
    net = DenseNet([Layer([[w]], [b], "identity")])
    pred, cache = net.forward([x], cache=True)
    g = backprop(net, 2 * (pred - target), cache)
    np.testing.assert_allclose(g, [2 * (w * x + b - target) * x, 2 * (w * x + b - target)])


def test_backprop_zero_seed():
    net = DenseNet.build([3, 5, 2], ["relu", "sigmoid"], rng=4)
    _, cache = net.forward(np.ones(3), cache=True)
    assert np.all(backprop(net, np.zeros(2), cache) == 0)


def test_backprop_without_cache():
    net = DenseNet.build([2, 1], ["identity"], rng=0)
    with pytest.raises(StateError):
        backprop(net, [1.0], None)
    other = DenseNet.build([2, 1], ["identity"], rng=0)
    _, cache = other.forward([1.0, 1.0], cache=True)
    with pytest.raises(StateError):
        backprop(net, [1.0], cache)


def _kink_free(net, x, margin=1e-3):
    return all(np.all(np.abs(p) >= margin) for p, l in zip(net.pre_activations(x), net.layers)
               if l.activation == "relu")


def test_backprop_matches_finite_differences_100_points():
    rng = np.random.default_rng(11)
    checked = 0
    while checked < 100:
        net = DenseNet.build([3, 6, 2], ["relu", "sigmoid"], rng=rng)
        net.set_flat(net.get_flat() + rng.normal(scale=0.1, size=net.parameter_count))
        x = rng.normal(size=3)
        target = rng.normal(size=2)
        if not _kink_free(net, x):
            continue

        def loss(n):
            return float(np.sum((n(x) - target) ** 2))

        pred, cache = net.forward(x, cache=True)
        analytic = backprop(net, 2 * (pred - target), cache)
        numeric = finite_diff_grad(net, loss, step=1e-5)
        assert np.max(relative_error(analytic, numeric, floor=1e-6)) < 1e-4
        checked += 1


def test_finite_diff_quadratic():
    net = DenseNet([Layer([[3.0]], [0.0], "identity")])
    g = finite_diff_grad(net, lambda n: n.layers[0].weight[0, 0] ** 2, step=1e-5)
    assert abs(g[0] - 6.0) < 1e-6
    assert g[1] == 0.0
    assert net.layers[0].weight[0, 0] == 3.0


def test_finite_diff_constant():
    net = DenseNet.build([2, 3, 1], ["relu", "identity"], rng=0)
    assert np.all(finite_diff_grad(net, lambda n: 4.2) == 0)


def test_optimizer_lr_zero_is_identity():
    net = DenseNet.build([3, 4, 1], ["relu", "identity"], rng=5)
    before = net.get_flat()
    optimizer_step(net, np.ones(net.parameter_count), AdamW(lr=0.0, weight_decay=0.01))
    np.testing.assert_array_equal(net.get_flat(), before)


def test_plain_sgd_arithmetic():
    net = DenseNet([Layer([[1.0]], [0.0], "identity")])
    optimizer_step(net, np.array([0.5, 0.0]), AdamW(lr=0.1, mode="sgd"))
    assert net.layers[0].weight[0, 0] == pytest.approx(0.95, abs=1e-15)


def test_optimizer_rejects_non_finite():
    net = DenseNet.build([2, 1], ["identity"], rng=0)
    before = net.get_flat()
    with pytest.raises(NumericError):
        AdamW(lr=0.1).step(net, np.array([0.0, np.nan, 0.0]))
    np.testing.assert_array_equal(net.get_flat(), before)


def test_adamw_reduces_convex_quadratic():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(32, 4))
    y = x @ np.array([1.0, -2.0, 0.5, 3.0]) + 0.3
    net = DenseNet.build([4, 1], ["identity"], rng=1)
    opt = AdamW(lr=0.05)
    losses = []
    for _ in range(50):
        pred, cache = net.forward(x, cache=True)
        r = pred[:, 0] - y
        losses.append(float(np.mean(r ** 2)))
        optimizer_step(net, backprop(net, (2 * r / len(y))[:, None], cache), opt)
    after_warmup = losses[5:]
    assert all(b <= a for a, b in zip(after_warmup, after_warmup[1:]))
    assert losses[-1] < 0.5 * losses[0]


def test_checkpoint_roundtrip(tmp_path):
    net = DenseNet.build([5, 7, 1], ["relu", "sigmoid"], rng=9)
    p = tmp_path / "net.bfnn"
    save_checkpoint(net, p)
    raw = p.read_bytes()
    assert raw[:4] == b"BFNN"
    assert len(raw) == 12 + 2 * 12 + 8 * net.parameter_count
    back = load_checkpoint(p)
    assert back.activations == ["relu", "sigmoid"]
    assert back.get_flat().tobytes() == net.get_flat().tobytes()


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.bfnn"
    p.write_bytes(b"XXXX" + bytes(20))
    with pytest.raises(IngestionError):
        load_checkpoint(p)
    net = DenseNet.build([2, 1], ["identity"], rng=0)
    save_checkpoint(net, p)
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(IngestionError):
        load_checkpoint(p)
