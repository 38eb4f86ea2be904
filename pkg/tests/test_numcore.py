import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cslab.numcore import (AdamState, Layer, MlpParams, NonFiniteError, ShapeError, adam_step,
                           finite_diff_jacobian, identity_mlp, init_mlp, load_networks, mlp, mlp_apply,
                           mlp_backward, mlp_forward, mlp_from_dict, mlp_to_dict, save_networks)

ACTS = ["leaky_relu", "tanh", "softplus", "identity", "sigmoid"]


def loop_forward(params, x):
    out = []
    for row in x:
        h = list(row)
        for layer in params.layers:
            z = [sum(h[i] * layer.weight[i, j] for i in range(len(h))) + layer.bias[j]
                 for j in range(layer.weight.shape[1])]
            act = {"identity": lambda v: v, "tanh": np.tanh, "sigmoid": lambda v: 1 / (1 + np.exp(-v)),
                   "softplus": lambda v: np.log1p(np.exp(v)),
                   "leaky_relu": lambda v: v if v > 0 else 0.2 * v}[layer.activation]
            h = [act(v) for v in z]
        out.append(h)
    return np.array(out)


def test_identity_layer():
    out, _ = mlp_forward(identity_mlp(2), np.array([[1.0, 2.0]]))
    assert np.array_equal(out, [[1.0, 2.0]])


def test_zero_weight_tanh_layer_is_constant():
    b = np.array([0.3, -1.2])
    net = MlpParams([Layer(np.zeros((3, 2)), b, "tanh")])
    out = mlp_apply(net, np.random.default_rng(0).standard_normal((5, 3)))
    assert np.allclose(out, np.tanh(b)[None].repeat(5, 0), atol=0, rtol=0)


@pytest.mark.parametrize("head", ACTS)
def test_forward_matches_plain_loop(head):
    rng = np.random.default_rng(1)
    net = init_mlp([2, 3, 2], ["leaky_relu", head], rng)
    x = rng.standard_normal((4, 2))
    assert np.max(np.abs(mlp_apply(net, x) - loop_forward(net, x))) < 1e-12


def test_forward_rejects_bad_width():
    with pytest.raises(ShapeError, match="columns"):
        mlp_forward(identity_mlp(2), np.zeros((1, 3)))


def test_layer_chain_validated():
    rng = np.random.default_rng(0)
    a = init_mlp([2, 3], ["tanh"], rng).layers[0]
    b = init_mlp([4, 1], ["tanh"], rng).layers[0]
    with pytest.raises(ShapeError):
        MlpParams([a, b])


def test_backward_identity_and_zero_upstream():
    net = identity_mlp(3)
    out, tape = mlp_forward(net, np.ones((2, 3)))
    _, gx = mlp_backward(net, tape, np.ones_like(out))
    assert np.array_equal(gx, np.ones((2, 3)))
    rng = np.random.default_rng(2)
    net = mlp([3, 5, 2], rng)
    out, tape = mlp_forward(net, rng.standard_normal((4, 3)))
    g, gx = mlp_backward(net, tape, np.zeros_like(out))
    assert all(not a.any() for a in g.arrays()) and not gx.any()


def test_backward_rejects_stale_tape():
    rng = np.random.default_rng(3)
    net = mlp([3, 4, 2], rng)
    other = mlp([3, 6, 2], rng)
    out, tape = mlp_forward(net, rng.standard_normal((2, 3)))
    with pytest.raises(ShapeError):
        mlp_backward(other, tape, np.ones_like(out))
    with pytest.raises(ShapeError):
        mlp_backward(net, tape, np.ones((3, 2)))


def _scalar_loss_grads(net, x, u):
    out, tape = mlp_forward(net, x)
    return mlp_backward(net, tape, u)


def _rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-6, np.abs(a) + np.abs(b)))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), depth=st.integers(1, 3), width=st.integers(1, 6),
       acts=st.lists(st.sampled_from(ACTS), min_size=3, max_size=3))
def test_backward_matches_finite_differences(seed, depth, width, acts):
    rng = np.random.default_rng(seed)
    sizes = [int(rng.integers(1, 5))] + [width] * (depth - 1) + [int(rng.integers(1, 4))]
    net = init_mlp(sizes, acts[:depth], rng)
    x = rng.standard_normal((3, sizes[0]))
    u = rng.standard_normal((3, sizes[-1]))
    g, gx = _scalar_loss_grads(net, x, u)

    def loss_of(arrays):
        return float(np.sum(u * mlp_apply(net.with_arrays(arrays), x)))

    arrays = net.arrays()
    for k, a in enumerate(arrays):
        flat = a.ravel()

        def f(v, k=k, shape=a.shape):
            arr = [b.copy() for b in arrays]
            arr[k] = v.reshape(shape)
            return np.array([loss_of(arr)])
        fd = finite_diff_jacobian(f, flat, 1e-5)[0]
        assert _rel_err(fd, g.arrays()[k].ravel()) < 1e-4
    fdx = finite_diff_jacobian(lambda v: np.array([np.sum(u * mlp_apply(net, v.reshape(x.shape)))]), x.ravel())[0]
    assert _rel_err(fdx, gx.ravel()) < 1e-4


def test_adam_zero_gradient_fixed_point():
    p = [np.array([1.0, -2.0])]
    st0 = AdamState.zeros_like(p, lr=0.1)
    st1, p1 = adam_step(st0, p, [np.zeros(2)])
    assert np.array_equal(p1[0], p[0]) and st1.step == st0.step + 1


def test_adam_first_step_moves_by_lr():
    st0 = AdamState.zeros_like([np.zeros(1)], lr=0.1)
    _, (w,) = adam_step(st0, [np.zeros(1)], [np.ones(1)])
    assert abs(w[0] + 0.1) < 1e-7


def test_adam_minimizes_quadratic():
    w = [np.ones(1)]
    st0 = AdamState.zeros_like(w, lr=0.05)
    for _ in range(100):
        st0, w = adam_step(st0, w, [2 * w[0]])
    assert abs(w[0][0]) < 0.2


def test_adam_nonfinite_gradient_names_layer():
    p = [np.zeros(2), np.zeros(2), np.zeros(2)]
    st0 = AdamState.zeros_like(p)
    with pytest.raises(NonFiniteError, match="layer 1"):
        adam_step(st0, p, [np.zeros(2), np.zeros(2), np.array([np.nan, 0.0])])


def test_finite_diff_examples():
    A = np.array([[1.0, 2.0], [3.0, -1.0], [0.5, 0.0]])
    assert np.allclose(finite_diff_jacobian(lambda v: A @ v, np.array([0.3, -0.7])), A, atol=1e-8)
    assert not finite_diff_jacobian(lambda v: np.array([4.0, 2.0]), np.zeros(3)).any()
    assert np.allclose(finite_diff_jacobian(np.sin, np.zeros(3), 1e-4), np.eye(3), atol=1e-8)
    with pytest.raises(ValueError):
        finite_diff_jacobian(np.sin, np.zeros(2), 0.0)
    with pytest.raises(NonFiniteError):
        with np.errstate(invalid="ignore"):
            finite_diff_jacobian(lambda v: np.log(v), np.zeros(1), 1e-3)


def test_forward_deterministic():
    rng = np.random.default_rng(5)
    net = mlp([4, 8, 3], rng)
    x = rng.standard_normal((6, 4))
    assert mlp_apply(net, x).tobytes() == mlp_apply(net, x).tobytes()


def test_serialization_round_trips_bit_exactly(tmp_path):
    rng = np.random.default_rng(7)
    nets = {"a": mlp([3, 5, 2], rng, head="sigmoid"), "b": init_mlp([2, 2], ["softplus"], rng)}
    back = mlp_from_dict(mlp_to_dict(nets["a"]))
    assert all(x.tobytes() == y.tobytes() for x, y in zip(back.arrays(), nets["a"].arrays()))
    save_networks(tmp_path / "m", nets, {"k": 1})
    loaded, meta = load_networks(tmp_path / "m")
    assert meta == {"k": 1}
    for name, net in nets.items():
        assert loaded[name].activations == net.activations
        assert all(x.tobytes() == y.tobytes() for x, y in zip(loaded[name].arrays(), net.arrays()))
