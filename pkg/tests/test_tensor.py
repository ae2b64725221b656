import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from nanohtnet import tensor as tn
from nanohtnet.errors import ContractError, DimensionError
from nanohtnet.tensor import Tape, Tensor

TOL = 1e-4


def check(fn, theta, samples=None):
    return tn.grad_check(fn, np.asarray(theta, dtype=np.float64), samples=samples)


def test_tensor_data_is_read_only():
    t = Tensor(np.ones(3))
    with pytest.raises(ValueError):
        t.data[0] = 2.0


def test_operators_match_numpy(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4,))
    ta, tb = Tensor(a), Tensor(b)
    np.testing.assert_allclose((ta + tb).data, a + b)
    np.testing.assert_allclose((ta - tb).data, a - b)
    np.testing.assert_allclose((ta * tb).data, a * b)
    np.testing.assert_allclose((ta / (tb * tb + 1)).data, a / (b * b + 1))
    m = rng.normal(size=(4, 2))
    np.testing.assert_allclose((ta @ Tensor(m)).data, a @ m)
    np.testing.assert_allclose((-ta).data, -a)


def test_backward_requires_scalar_and_tracked_loss():
    tape = Tape()
    x = tape.watch(np.ones(3))
    with pytest.raises(ContractError):
        tn.backward(tape, tn.mul(x, x))
    with pytest.raises(ContractError):
        tn.backward(tape, Tensor(np.float64(1.0)))


def test_untouched_leaf_gets_zero_gradient():
    tape = Tape()
    x = tape.watch(np.ones(3))
    y = tape.watch(np.ones(2))
    g = tn.backward(tape, tn.sum(tn.mul(x, x)))
    np.testing.assert_array_equal(g[y.node], np.zeros(2))
    np.testing.assert_array_equal(g[x.node], 2 * np.ones(3))


def test_gradient_accumulates_over_reuse():
    _, (g,) = tn.grad(lambda x: tn.sum(tn.add(tn.mul(x, x), x)), np.array([1.0, -2.0]))
    np.testing.assert_allclose(g, [3.0, -3.0])


def test_matmul_dimension_error():
    with pytest.raises(DimensionError):
        tn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_gelu_reference_values():
    # exact erf form: 0.5 x (1 + erf(x / sqrt 2))
    out = tn.gelu(Tensor(np.array([-1.0, 0.0, 1.0]))).data
    np.testing.assert_allclose(out, [-0.15865525393145707, 0.0, 0.8413447460685429], rtol=1e-12)


def test_softmax_rows_sum_to_one(rng):
    s = tn.softmax_lastdim(Tensor(rng.normal(size=(5, 7)) * 30)).data
    np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-12)


def test_layer_norm_zero_mean_unit_variance(rng):
    x = rng.normal(3.0, 5.0, size=(4, 16))
    y = tn.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-10)
    np.testing.assert_allclose(y.var(-1), 1.0, atol=1e-4)


def test_norm_lastdim_subgradient_at_origin():
    _, (g,) = tn.grad(lambda x: tn.sum(tn.norm_lastdim(x)), np.zeros((2, 3)))
    np.testing.assert_array_equal(g, np.zeros((2, 3)))


def test_conv1d_strided_matches_loop(rng):
    x = rng.normal(size=(2, 12, 5))
    w = rng.normal(size=(3, 5, 4))
    b = rng.normal(size=4)
    out = tn.conv1d_strided(Tensor(x), Tensor(w), Tensor(b), stride=3).data
    ref = np.stack([sum(x[:, 3 * i + k] @ w[k] for k in range(3)) + b for i in range(4)], axis=1)
    np.testing.assert_allclose(out, ref, rtol=1e-12)


def test_scatter_places_rows_and_zeros_elsewhere(rng):
    x = rng.normal(size=(3, 2))
    out = tn.scatter(Tensor(x), [4, 0, 2], 6, axis=0).data
    np.testing.assert_array_equal(out[[4, 0, 2]], x)
    np.testing.assert_array_equal(out[[1, 3, 5]], 0.0)


def test_l2_normalize_unit_norm(rng):
    out = tn.l2_normalize(Tensor(rng.normal(size=(6, 9)))).data
    np.testing.assert_allclose(np.linalg.norm(out, axis=-1), 1.0, atol=1e-12)


@given(arrays(np.float64, (3, 4), elements=st.floats(-3, 3)),
       arrays(np.float64, (4,), elements=st.floats(-3, 3)))
def test_broadcast_gradient_shapes(a, b):
    _, (ga, gb) = tn.grad(lambda x, y: tn.sum(tn.mul(tn.add(x, y), y)), a, b)
    assert ga.shape == a.shape and gb.shape == b.shape
    np.testing.assert_allclose(gb, (a + 2 * b).sum(0), atol=1e-9)


# finite-difference checks of every differentiable op (float64)

W = np.random.default_rng(7).normal(size=(3, 4))
V = np.random.default_rng(8).normal(size=(4, 5))

UNARY = {
    "exp": lambda x: tn.sum(tn.mul(tn.exp(x), Tensor(W))),
    "log": lambda x: tn.sum(tn.log(tn.add(tn.mul(x, x), 1.0))),
    "sqrt": lambda x: tn.sum(tn.sqrt(tn.add(tn.mul(x, x), 0.5))),
    "gelu": lambda x: tn.sum(tn.mul(tn.gelu(x), Tensor(W))),
    "div": lambda x: tn.sum(tn.div(Tensor(W), tn.add(tn.mul(x, x), 1.0))),
    "scale": lambda x: tn.sum(tn.mul(tn.scale(x, -2.5), Tensor(W))),
    "sum_axis": lambda x: tn.sum(tn.mul(tn.sum(x, axis=0, keepdims=True), x)),
    "mean": lambda x: tn.mean(tn.mul(x, tn.mean(x, axis=1, keepdims=True))),
    "norm": lambda x: tn.sum(tn.norm_lastdim(x)),
    "logsumexp": lambda x: tn.sum(tn.mul(tn.logsumexp_lastdim(x), Tensor(np.arange(3.0)))),
    "softmax": lambda x: tn.sum(tn.mul(tn.softmax_lastdim(x), Tensor(W))),
    "reshape": lambda x: tn.sum(tn.mul(tn.reshape(x, (4, 3)), Tensor(W.T))),
    "permute": lambda x: tn.sum(tn.mul(tn.permute(x, (1, 0)), Tensor(W.T))),
    "swap_last": lambda x: tn.sum(tn.mul(tn.swap_last(x), Tensor(W.T))),
    "concat": lambda x: tn.sum(tn.mul(tn.concat([x, tn.mul(x, x)], axis=0), Tensor(np.vstack([W, W])))),
    "slice": lambda x: tn.sum(tn.mul(tn.slice_axis(x, 1, 3, axis=-1), Tensor(W[:, :2]))),
    "take": lambda x: tn.sum(tn.mul(tn.take(x, [0, 2, 2], axis=0), Tensor(W))),
    "scatter": lambda x: tn.sum(tn.mul(tn.scatter(x, [3, 0, 1], 5, axis=0), Tensor(np.ones((5, 4)) * 1.5))),
    "matmul": lambda x: tn.sum(tn.mul(tn.matmul(x, Tensor(V)), tn.matmul(x, Tensor(V)))),
    "linear": lambda x: tn.sum(tn.gelu(tn.linear(x, Tensor(V), Tensor(np.ones(5))))),
    "layer_norm": lambda x: tn.sum(tn.mul(tn.layer_norm(x, Tensor(np.arange(1.0, 5.0)), Tensor(np.ones(4))), Tensor(W))),
    "l2_normalize": lambda x: tn.sum(tn.mul(tn.l2_normalize(x), Tensor(W))),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_grad_check_ops(name):
    theta = np.random.default_rng(3).normal(size=(3, 4))
    assert check(UNARY[name], theta) < TOL


def test_grad_check_conv1d():
    x = np.random.default_rng(4).normal(size=(2, 6, 3))

    def f(w):
        return tn.sum(tn.gelu(tn.conv1d_strided(Tensor(x), w, Tensor(np.ones(2)), stride=2)))

    assert check(f, np.random.default_rng(5).normal(size=(2, 3, 2))) < TOL

    def g(xx):
        w = Tensor(np.random.default_rng(5).normal(size=(3, 3, 2)))
        return tn.sum(tn.mul(tn.conv1d_strided(xx, w, stride=3), tn.conv1d_strided(xx, w, stride=3)))

    assert check(g, x) < TOL


def test_grad_check_sampling_is_seeded():
    f = UNARY["gelu"]
    theta = np.random.default_rng(1).normal(size=(3, 4))
    a = tn.grad_check(f, theta, samples=5, rng=np.random.default_rng(0))
    b = tn.grad_check(f, theta, samples=5, rng=np.random.default_rng(0))
    assert a == b


def test_linear_accepts_vector(rng):
    w, b = rng.normal(size=(5, 3)), rng.normal(size=3)
    x = rng.normal(size=5)
    np.testing.assert_allclose(tn.linear(Tensor(x), Tensor(w), Tensor(b)).data, x @ w + b, atol=1e-12)
    assert tn.grad_check(lambda v: tn.sum(tn.linear(v, Tensor(w), Tensor(b))), x) < 1e-6
