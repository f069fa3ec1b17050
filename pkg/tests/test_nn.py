import math

import numpy as np
import pytest

from f2gan_diag import nn


def scalar_forward(mlp, batch):
    """Element-by-element recomputation used as an oracle for nn.forward."""
    rows = []
    for x in batch:
        a = [float(v) for v in x]
        for layer in mlp.layers:
            z = []
            for o in range(layer.n_out):
                s = layer.bias[o]
                for i in range(layer.n_in):
                    s += layer.weights[o, i] * a[i]
                z.append(s)
            kind = layer.activation.kind
            if kind == "relu":
                a = [max(v, 0.0) for v in z]
            elif kind == "leaky_relu":
                a = [v if v > 0 else layer.activation.slope * v for v in z]
            elif kind == "tanh":
                a = [math.tanh(v) for v in z]
            elif kind == "sigmoid":
                a = [1.0 / (1.0 + math.exp(-v)) for v in z]
            elif kind == "softmax":
                m = max(z)
                e = [math.exp(v - m) for v in z]
                a = [v / sum(e) for v in e]
            else:
                a = z
        rows.append(a)
    return np.array(rows)


def random_net(rng, sizes, acts):
    return nn.Mlp.build(sizes, acts, rng)


def zero_layer(n_in, n_out, act):
    return nn.Mlp([nn.DenseLayer(np.zeros((n_out, n_in)), np.zeros(n_out), act)])


def test_zero_sigmoid_layer_outputs_half():
    out, _ = nn.forward(zero_layer(5, 3, nn.SIGMOID), np.random.default_rng(0).normal(size=(4, 5)))
    assert np.all(out == 0.5)


def test_zero_tanh_layer_outputs_zero():
    out, _ = nn.forward(zero_layer(5, 3, nn.TANH), np.ones((2, 5)))
    assert np.all(out == 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_forward_matches_scalar_loop(seed):
    rng = np.random.default_rng(seed)
    net = random_net(rng, [6, 8, 5, 3], [nn.leaky_relu(), nn.TANH, nn.SOFTMAX])
    batch = rng.normal(size=(4, 6))
    out, trace = nn.forward(net, batch)
    np.testing.assert_allclose(out, scalar_forward(net, batch), rtol=1e-12, atol=1e-14)
    assert len(trace) == 3


def test_forward_rejects_bad_width():
    net = random_net(np.random.default_rng(0), [4, 3], [nn.RELU])
    with pytest.raises(nn.ShapeError, match="5.*4"):
        nn.forward(net, np.zeros((2, 5)))


def test_mismatched_layers_rejected():
    a = nn.DenseLayer(np.zeros((3, 2)), np.zeros(3))
    b = nn.DenseLayer(np.zeros((1, 4)), np.zeros(1))
    with pytest.raises(nn.ShapeError):
        nn.Mlp([a, b])


def test_bad_leaky_slope_and_dropout_rejected():
    with pytest.raises(ValueError):
        nn.leaky_relu(1.5)
    with pytest.raises(ValueError):
        nn.DenseLayer(np.zeros((1, 1)), np.zeros(1), dropout_rate=1.0)


def test_identity_layer_gradients():
    rng = np.random.default_rng(1)
    net = random_net(rng, [3, 2], [nn.IDENTITY])
    x = rng.normal(size=(5, 3))
    g = rng.normal(size=(5, 2))
    _, trace = nn.forward(net, x)
    grads = nn.backward(net, trace, g)
    np.testing.assert_allclose(grads.weights[0], g.T @ x)
    np.testing.assert_allclose(grads.bias[0], g.sum(axis=0))
    np.testing.assert_allclose(grads.input, g @ net.layers[0].weights)


def test_zero_output_grad_gives_zero_gradients():
    rng = np.random.default_rng(2)
    net = random_net(rng, [4, 6, 2], [nn.TANH, nn.SIGMOID])
    out, trace = nn.forward(net, rng.normal(size=(3, 4)))
    grads = nn.backward(net, trace, np.zeros_like(out))
    assert all(not np.any(g) for g in grads.flat())
    assert not np.any(grads.input)


def test_stale_trace_rejected():
    rng = np.random.default_rng(3)
    net = random_net(rng, [2, 2], [nn.TANH])
    out, trace = nn.forward(net, rng.normal(size=(2, 2)))
    grads = nn.backward(net, trace, np.ones_like(out))
    nn.adam_step(net, grads, nn.AdamState.for_mlp(net))
    with pytest.raises(nn.StaleTraceError):
        nn.backward(net, trace, np.ones_like(out))
    _, trace = nn.forward(net, rng.normal(size=(2, 2)))
    with pytest.raises(nn.ShapeError):
        nn.backward(net, trace, np.ones((3, 2)))


@pytest.mark.parametrize("seed", range(10))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = random_net(rng, [5, 7, 4, 3], [nn.TANH, nn.SIGMOID, nn.SOFTMAX])
    x = rng.normal(size=(4, 5))
    onehot = np.eye(3)[rng.integers(0, 3, size=4)]
    check = nn.grad_check(net, x, nn.softmax_cross_entropy(onehot), h=1e-5)
    assert check.max_rel_error <= 1e-4
    assert check.skipped == 0


def test_input_gradient_finite_differences():
    rng = np.random.default_rng(11)
    net = random_net(rng, [4, 6, 2], [nn.TANH, nn.SIGMOID])
    x = rng.normal(size=(3, 4))
    target = rng.normal(size=(3, 2))
    loss = nn.squared_error(target)
    out, trace = nn.forward(net, x)
    g_in = nn.backward(net, trace, loss(out)[1]).input
    h = 1e-5
    for idx in np.ndindex(*x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        num = (loss(net(xp))[0] - loss(net(xm))[0]) / (2 * h)
        assert abs(num - g_in[idx]) <= 1e-7 * max(1.0, abs(num))


def test_injected_feature_gradient():
    rng = np.random.default_rng(12)
    net = random_net(rng, [3, 5, 4, 1], [nn.TANH, nn.TANH, nn.SIGMOID])
    x = rng.normal(size=(4, 3))
    w = rng.normal(size=(4, 4))
    # loss = sum(out) + sum(w * hidden1)
    out, trace = nn.forward(net, x)
    grads = nn.backward(net, trace, np.ones_like(out), injected={1: w})

    def total(p_net):
        o, tr = nn.forward(p_net, x)
        return o.sum() + np.sum(w * tr.post[1])

    h = 1e-6
    p = net.layers[0].weights
    for idx in [(0, 0), (2, 1), (4, 2)]:
        orig = p[idx]
        p[idx] = orig + h
        fp = total(net)
        p[idx] = orig - h
        fm = total(net)
        p[idx] = orig
        assert abs((fp - fm) / (2 * h) - grads.weights[0][idx]) < 1e-7


def test_grad_check_linear_quadratic_is_near_exact():
    rng = np.random.default_rng(4)
    net = random_net(rng, [4, 3, 2], [nn.IDENTITY, nn.IDENTITY])
    x = rng.normal(size=(6, 4))
    check = nn.grad_check(net, x, nn.squared_error(rng.normal(size=(6, 2))))
    assert check.max_rel_error <= 1e-7


def test_grad_check_leaky_relu_away_from_kinks():
    rng = np.random.default_rng(5)
    net = random_net(rng, [4, 8, 2], [nn.leaky_relu(0.2), nn.IDENTITY])
    x = rng.normal(size=(5, 4))
    check = nn.grad_check(net, x, nn.squared_error(rng.normal(size=(5, 2))))
    assert check.max_rel_error <= 1e-4


def test_grad_check_skips_relu_kink():
    # hidden pre-activation of the first unit is exactly zero for the sample
    w1 = np.array([[1.0, -1.0], [0.5, 0.3]])
    net = nn.Mlp([nn.DenseLayer(w1, np.zeros(2), nn.RELU),
                  nn.DenseLayer(np.array([[1.0, 2.0]]), np.zeros(1), nn.IDENTITY)])
    x = np.array([[1.0, 1.0]])
    check = nn.grad_check(net, x, nn.squared_error(np.array([[3.0]])))
    assert check.skipped > 0
    assert check.max_rel_error <= 1e-6


def test_adam_zero_gradients_leave_params():
    rng = np.random.default_rng(6)
    net = random_net(rng, [3, 4, 2], [nn.TANH, nn.IDENTITY])
    before = [p.copy() for p in net.params()]
    zero = nn.Gradients([np.zeros_like(l.weights) for l in net.layers],
                        [np.zeros_like(l.bias) for l in net.layers], np.zeros((1, 3)))
    state = nn.AdamState.for_mlp(net)
    nn.adam_step(net, zero, state)
    assert state.step == 1
    for a, b in zip(before, net.params()):
        np.testing.assert_array_equal(a, b)


def test_adam_first_step_magnitude_is_lr():
    net = nn.Mlp([nn.DenseLayer(np.array([[0.7]]), np.array([0.0]))])
    grads = nn.Gradients([np.array([[1.0]])], [np.array([0.0])], np.zeros((1, 1)))
    nn.adam_step(net, grads, nn.AdamState.for_mlp(net, lr=0.1))
    # m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
    assert net.layers[0].weights[0, 0] == pytest.approx(0.7 - 0.1 / (1 + 1e-8), abs=1e-15)


def test_adam_deterministic():
    nets = []
    for _ in range(2):
        rng = np.random.default_rng(7)
        net = random_net(rng, [3, 5, 1], [nn.leaky_relu(), nn.SIGMOID])
        state = nn.AdamState.for_mlp(net)
        x = rng.normal(size=(8, 3))
        for _ in range(5):
            out, tr = nn.forward(net, x)
            nn.adam_step(net, nn.backward(net, tr, out - 0.3), state)
        nets.append(net)
    for a, b in zip(nets[0].params(), nets[1].params()):
        assert a.tobytes() == b.tobytes()


def test_inverted_dropout_preserves_expectation():
    rng = np.random.default_rng(8)
    net = nn.Mlp([nn.DenseLayer(rng.normal(size=(4, 3)), rng.normal(size=4), nn.SIGMOID, 0.3)])
    x = rng.normal(size=(1, 3))
    clean = net(x)
    draws = np.tile(x, (20000, 1))
    out, trace = nn.forward(net, draws, nn.TRAIN, rng)
    assert trace.masks[0] is not None
    np.testing.assert_allclose(out.mean(axis=0), clean[0], rtol=0.01)


def test_infer_mode_ignores_rng():
    rng = np.random.default_rng(9)
    net = nn.Mlp.build([3, 6, 2], [nn.RELU, nn.IDENTITY], rng, dropout=[0.5, 0.0])
    x = rng.normal(size=(4, 3))
    a, tr = nn.forward(net, x, nn.INFER, np.random.default_rng(1))
    b, _ = nn.forward(net, x, nn.INFER, np.random.default_rng(2))
    np.testing.assert_array_equal(a, b)
    assert all(m is None for m in tr.masks)


def test_dropout_gradient_honours_mask():
    rng = np.random.default_rng(10)
    net = nn.Mlp.build([3, 6, 1], [nn.TANH, nn.IDENTITY], rng, dropout=[0.5, 0.0])
    x = rng.normal(size=(2, 3))
    out, trace = nn.forward(net, x, nn.TRAIN, np.random.default_rng(0))
    grads = nn.backward(net, trace, np.ones_like(out))
    # fixed mask -> the masked net is an ordinary differentiable function
    mask = trace.masks[0]
    h = 1e-6
    w = net.layers[0].weights

    def f():
        hdn = np.tanh(x @ w.T + net.layers[0].bias) * mask
        return float(np.sum(hdn @ net.layers[1].weights.T + net.layers[1].bias))
    for idx in np.ndindex(*w.shape):
        orig = w[idx]
        w[idx] = orig + h
        fp = f()
        w[idx] = orig - h
        fm = f()
        w[idx] = orig
        assert abs((fp - fm) / (2 * h) - grads.weights[0][idx]) < 1e-7


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(13)
    net = random_net(rng, [4, 12], [nn.SOFTMAX])
    out = net(rng.normal(size=(50, 4)) * 30)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


def test_json_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(14)
    net = nn.Mlp.build([3, 5, 2], [nn.leaky_relu(0.2), nn.SIGMOID], rng, dropout=[0.3, 0.0])
    path = tmp_path / "net.json"
    nn.save(net, path)
    back = nn.load(path)
    for a, b in zip(net.params(), back.params()):
        assert a.tobytes() == b.tobytes()
    assert [l.activation for l in back.layers] == [l.activation for l in net.layers]
    assert back.layers[0].dropout_rate == 0.3
