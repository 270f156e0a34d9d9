import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dessilbi.core import make_rng
from dessilbi.errors import ArgumentError, DimensionError, NumericError
from dessilbi.network import (LayerSpec as L, NetworkSpec, backward, count_macs, evaluate, forward,
                              init_params, loss_and_grad, param_shapes, scale_layers)
from gradcheck import max_relative_error

# one small network per layer kind, all smooth where the kind allows it
GRAD_NETS = {
    "dense_tanh_mse": NetworkSpec((L.dense(4, 5), L.act("tanh"), L.dense(5, 2)), (4,), "mse"),
    "dense_softplus_ce": NetworkSpec((L.dense(4, 6), L.act("softplus"), L.dense(6, 3)), (4,)),
    "dense_sigmoid_ce": NetworkSpec((L.dense(4, 6), L.act("sigmoid"), L.dense(6, 3)), (4,)),
    "dense_relu_ce": NetworkSpec((L.dense(4, 6), L.act("relu"), L.dense(6, 3)), (4,)),
    "conv_stride_pad": NetworkSpec((L.conv(2, 3, 3, stride=2, padding=1), L.act("tanh"),
                                    L.flatten(), L.dense(3 * 3 * 3, 2)), (2, 6, 6)),
    "conv_maxpool": NetworkSpec((L.conv(1, 2, 2), L.act("softplus"), L.maxpool(2), L.flatten(),
                                 L.dense(2 * 2 * 2, 3)), (1, 5, 5)),
    "conv_avgpool": NetworkSpec((L.conv(1, 2, 3, padding=1), L.act("tanh"), L.avgpool(2, 1),
                                 L.flatten(), L.dense(2 * 3 * 3, 2)), (1, 4, 4), "mse"),
    "residual": NetworkSpec((L.dense(3, 4), L.act("tanh"),
                             L.residual(L.dense(4, 4), L.act("tanh"), L.dense(4, 4)),
                             L.dense(4, 2)), (3,)),
    "conv_residual": NetworkSpec((L.conv(1, 2, 3, padding=1),
                                  L.residual(L.conv(2, 2, 3, padding=1), L.act("softplus")),
                                  L.flatten(), L.dense(2 * 4 * 4, 2)), (1, 4, 4)),
}


def batch(net, n, seed):
    rng = make_rng(seed)
    x = rng.standard_normal((n,) + net.input_shape)
    k = net.output_shape[0]
    y = rng.standard_normal((n, k)) if net.loss == "mse" else rng.integers(0, k, n)
    return x, y


@pytest.mark.parametrize("name", sorted(GRAD_NETS))
def test_gradient_matches_finite_differences(name):
    net = GRAD_NETS[name]
    rng = make_rng(7)
    params = init_params(net, rng)
    params = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in params.items()}
    x, y = batch(net, 3, 11)
    assert max_relative_error(net, params, x, y) <= 1e-5


def test_identity_mse_zero_loss_and_gradient():
    net = NetworkSpec((L.dense(3, 3),), (3,), "mse")
    params = {"0.weight": np.eye(3), "0.bias": np.zeros(3)}
    x = make_rng(0).standard_normal((5, 3))
    fp = forward(net, params, x, x)
    assert fp.loss == 0.0
    grads = backward(net, params, fp)
    assert not np.any(grads["0.weight"]) and not np.any(grads["0.bias"])


def test_zero_params_uniform_ce():
    net = NetworkSpec((L.dense(4, 7),), (4,))
    params = {k: np.zeros(s) for k, s in param_shapes(net).items()}
    x, y = batch(net, 6, 1)
    assert forward(net, params, x, y).loss == pytest.approx(np.log(7), abs=1e-15)


def test_scalar_least_squares():
    net = NetworkSpec((L.dense(1, 1, bias=False),), (1,), "mse")
    params = {"0.weight": np.array([[2.0]])}
    loss, grads = loss_and_grad(net, params, np.array([[3.0]]), np.array([[5.0]]))
    assert loss == 0.5
    assert grads["0.weight"][0, 0] == 3.0


def test_batch_mean_linearity():
    net = GRAD_NETS["conv_maxpool"]
    params = init_params(net, make_rng(2))
    x, y = batch(net, 5, 3)
    whole = forward(net, params, x, y).loss
    single = np.mean([forward(net, params, x[i:i + 1], y[i:i + 1]).loss for i in range(5)])
    assert abs(whole - single) <= 1e-12


def relu_net():
    return NetworkSpec((L.dense(5, 8, bias=False), L.act("relu"), L.dense(8, 4, bias=False)), (5,))


def test_scale_layers_examples():
    net = relu_net()
    params = init_params(net, make_rng(4))
    x, _ = batch(net, 10, 5)
    base = forward(net, params, x).output
    same = scale_layers(params, [1, 1])
    assert all(np.array_equal(same[k], params[k]) for k in params)
    assert np.allclose(forward(net, scale_layers(params, [2, 0.5]), x).output, base,
                       rtol=1e-14, atol=1e-14)
    assert np.allclose(forward(net, scale_layers(params, [2, 3]), x).output, 6 * base,
                       rtol=1e-13, atol=1e-14)
    with pytest.raises(ArgumentError):
        scale_layers(params, [1, 0])
    with pytest.raises(ArgumentError):
        scale_layers(params, {"0": -1.0})


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(1e-3, 1e3), min_size=2, max_size=2), st.integers(0, 10**6))
def test_argmax_invariant_under_positive_scaling(factors, seed):
    net = relu_net()
    params = init_params(net, make_rng(seed))
    x, _ = batch(net, 20, seed + 1)
    a = forward(net, params, x).output
    b = forward(net, scale_layers(params, factors), x).output
    # only compare samples whose top two logits are clearly separated
    top2 = np.sort(a, axis=1)[:, -2:]
    clear = (top2[:, 1] - top2[:, 0]) > 1e-9 * (np.abs(top2[:, 1]) + 1)
    assert np.array_equal(a.argmax(1)[clear], b.argmax(1)[clear])


def test_maxpool_ties_go_to_first_index():
    net = NetworkSpec((L.maxpool(2), L.flatten(), L.dense(1, 1, bias=False)), (1, 2, 2), "mse")
    params = {"2.weight": np.ones((1, 1))}
    x = np.ones((1, 1, 2, 2))
    fp = forward(net, params, x, np.zeros((1, 1)))
    _, arg = fp.caches[0]
    assert arg.ravel()[0] == 0


def test_shape_validation():
    with pytest.raises(DimensionError):
        NetworkSpec((L.dense(3, 4), L.dense(5, 2)), (3,))
    with pytest.raises(DimensionError):
        NetworkSpec((L.residual(L.dense(3, 4)),), (3,))
    with pytest.raises(ArgumentError):
        L.act("gelu")
    net = relu_net()
    with pytest.raises(DimensionError):
        forward(net, init_params(net, make_rng(0)), np.ones((2, 4)))
    with pytest.raises(DimensionError):
        forward(net, init_params(net, make_rng(0)), np.ones((2, 5)), np.array([0, 9]))


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_non_finite_activation_raises():
    net = NetworkSpec((L.dense(2, 2),), (2,))
    params = {"0.weight": np.full((2, 2), 1e308), "0.bias": np.zeros(2)}
    with pytest.raises(NumericError):
        forward(net, params, np.full((1, 2), 10.0))


def test_spec_round_trip_and_macs():
    net = GRAD_NETS["conv_residual"]
    assert NetworkSpec.from_dict(net.to_dict()) == net
    params = init_params(net, make_rng(0))
    # conv 2*1*9*16 + inner conv 2*2*9*16 + dense 32*2
    assert count_macs(net) == 288 + 576 + 64
    params["1.0.weight"][:] = 0.0
    assert count_macs(net, params) == 288 + 64


def test_evaluate_accuracy_and_mse():
    net = NetworkSpec((L.dense(2, 2, bias=False),), (2,))
    params = {"0.weight": np.eye(2)}
    x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    assert evaluate(net, params, x, np.array([0, 1, 1])) == pytest.approx(200 / 3)
    reg = NetworkSpec((L.dense(2, 2, bias=False),), (2,), "mse")
    assert evaluate(reg, params, x, x) == 0.0
