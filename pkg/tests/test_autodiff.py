import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from dagnet import autodiff as ad
from dagnet.autodiff import DomainError, ShapeError, Tape, Tensor, gradcheck


def param(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0, scale, size=shape), requires_grad=True)


# -- forward values ----------------------------------------------------------

def test_matmul_identity_and_hand_oracle():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ad.matmul(Tensor(np.eye(2)), a).data, a.data)
    # 1*5 + 2*6 = 17, 3*5 + 4*6 = 39
    assert np.array_equal(ad.matmul(a, Tensor([[5.0], [6.0]])).data, [[17.0], [39.0]])


def test_matmul_annihilator(rng):
    out = ad.matmul(Tensor(np.zeros((3, 3))), Tensor(rng.normal(size=(3, 3))))
    assert np.array_equal(out.data, np.zeros((3, 3)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_elementwise_fixed_points():
    assert ad.tanh(Tensor(0.0)).item() == 0.0
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5
    assert ad.exp(ad.log(Tensor(2.5))).item() == pytest.approx(2.5, rel=1e-15)
    assert np.array_equal(ad.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])
    assert np.array_equal(ad.leaky_relu(Tensor([-1.0, 2.0]), 0.2).data, [-0.2, 2.0])


def test_log_of_nonpositive_is_a_domain_error():
    with pytest.raises(DomainError):
        ad.log(Tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        ad.log(Tensor([-3.0]))


def test_elementwise_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(ShapeError):
        ad.mul(Tensor(np.ones((2, 3))), Tensor(np.ones(2)))


def test_bias_broadcast_over_rows():
    x = Tensor(np.zeros((3, 2)))
    b = Tensor([1.0, -1.0])
    assert np.array_equal(ad.add(x, b).data, np.tile([1.0, -1.0], (3, 1)))


def test_softmax_examples():
    assert np.allclose(ad.softmax(Tensor([7.0, 7.0, 7.0])).data, [1 / 3] * 3, atol=1e-15)
    assert np.allclose(ad.softmax(Tensor([0.0, math.log(2.0)])).data, [1 / 3, 2 / 3], atol=1e-15)
    big = ad.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(big))
    assert big[0] == pytest.approx(1.0) and big[1] < 1e-300


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6),
                  elements=st.floats(-50, 50)))
def test_softmax_rows_on_simplex(x):
    p = ad.softmax(Tensor(x), axis=1).data
    assert np.all((p >= 0) & (p <= 1))
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12, rtol=0)


def test_concat_shapes():
    a, b = Tensor(np.arange(2.0)), Tensor(np.arange(3.0))
    assert np.array_equal(ad.concat([a, b], axis=0).data, [0, 1, 0, 1, 2])
    rows = ad.concat([Tensor(np.ones((1, 2))), Tensor(np.zeros((1, 2)))], axis=0)
    assert rows.shape == (2, 2)
    with pytest.raises(ShapeError):
        ad.concat([Tensor(np.ones((1, 2))), Tensor(np.ones((1, 3)))], axis=0)


# -- backward ----------------------------------------------------------------

def test_backward_of_sum_is_ones(rng):
    x = param(rng, 3, 4)
    with Tape():
        loss = ad.reduce_sum(x)
    ad.backward(loss)
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_backward_of_sum_of_squares():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape():
        loss = ad.reduce_sum(x * x)
    ad.backward(loss)
    assert np.array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_accumulates_across_calls():
    x = Tensor([1.0, 2.0], requires_grad=True)
    for _ in range(2):
        with Tape():
            loss = ad.reduce_sum(x * 3.0)
        ad.backward(loss)
    assert np.array_equal(x.grad, [6.0, 6.0])


def test_backward_needs_scalar(rng):
    x = param(rng, 2)
    with Tape():
        y = x * 2.0
    with pytest.raises(ShapeError):
        ad.backward(y)


def test_matmul_backward_rule(rng):
    a, b = param(rng, 3, 4), param(rng, 4, 2)
    g = rng.normal(size=(3, 2))
    with Tape():
        loss = ad.reduce_sum(ad.matmul(a, b) * Tensor(g))
    ad.backward(loss)
    assert np.allclose(a.grad, g @ b.data.T, atol=1e-14)
    assert np.allclose(b.grad, a.data.T @ g, atol=1e-14)


def test_concat_backward_splits_gradient(rng):
    a, b = param(rng, 2, 3), param(rng, 2, 2)
    w = Tensor(rng.normal(size=(2, 5)))
    assert gradcheck(lambda: ad.reduce_sum(ad.concat([a, b], axis=1) * w), [a, b]) < 1e-6
    a.zero_grad()
    b.zero_grad()
    with Tape():
        loss = ad.reduce_sum(ad.concat([a, b], axis=1) * w)
    ad.backward(loss)
    assert np.array_equal(a.grad, w.data[:, :3]) and np.array_equal(b.grad, w.data[:, 3:])


UNARY = {
    "exp": ad.exp,
    "log": lambda t: ad.log(ad.exp(t) + 0.5),
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "relu": ad.relu,
    "leaky_relu": lambda t: ad.leaky_relu(t, 0.2),
    "elu": ad.elu,
    "neg": ad.neg,
    "softmax": lambda t: ad.softmax(t, axis=1),
    "transpose": ad.transpose,
    "reshape": lambda t: ad.reshape(t, (-1,)),
    "mean": lambda t: ad.reduce_mean(t, axis=0),
    "getitem": lambda t: t[1:, ::2],
    "clip": lambda t: ad.clip(t, -0.5, 0.5),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name, rng):
    x = param(rng, 3, 4)
    # keep kinks of relu-like ops away from the finite-difference stencil
    x.data = np.where(np.abs(x.data) < 0.05, 0.3, x.data)
    x.data = np.where(np.abs(np.abs(x.data) - 0.5) < 0.05, 0.7, x.data)
    w = Tensor(rng.normal(size=UNARY[name](Tensor(x.data)).shape))
    err = gradcheck(lambda: ad.reduce_sum(UNARY[name](x) * w), [x])
    assert err < 1e-4


@pytest.mark.parametrize("name", ["add", "sub", "mul", "matmul", "linear", "bias"])
def test_binary_gradients(name, rng):
    a, b = param(rng, 3, 4), param(rng, 3, 4)
    w_ = param(rng, 5, 4)
    bias = param(rng, 4)
    fns = {
        "add": lambda: a + b,
        "sub": lambda: a - b,
        "mul": lambda: a * b,
        "matmul": lambda: ad.matmul(a, ad.transpose(w_)),
        "linear": lambda: ad.linear(a, w_, param_b5),
        "bias": lambda: a + bias,
    }
    param_b5 = param(rng, 5)
    w = Tensor(rng.normal(size=fns[name]().shape))
    err = gradcheck(lambda: ad.reduce_sum(fns[name]() * w), [a, b, w_, bias, param_b5])
    assert err < 1e-4


def _random_graph(rng, depth):
    """A random composition of primitives of the given depth over two leaves."""
    x, y = param(rng, 2, 3), param(rng, 2, 3)
    ops = [
        lambda u, v: ad.tanh(u) + v,
        lambda u, v: u * ad.sigmoid(v),
        lambda u, v: ad.softmax(u, axis=1) * 2.0 - v,
        lambda u, v: ad.exp(u * 0.3) - ad.leaky_relu(v, 0.2),
        lambda u, v: ad.elu(u) * v,
        lambda u, v: ad.matmul(ad.matmul(u, ad.transpose(v)), v) * 0.1,
    ]
    picks = rng.integers(len(ops), size=depth)

    def fn():
        u, v = x, y
        for k in picks:
            u, v = ops[k](u, v), u
        return ad.reduce_sum(u * u)
    return fn, [x, y]


@pytest.mark.parametrize("seed", range(8))
def test_random_composite_graphs(seed):
    rng = np.random.default_rng(seed)
    fn, params = _random_graph(rng, depth=int(rng.integers(1, 7)))
    assert gradcheck(fn, params) < 1e-4


def test_determinism_of_outputs_and_gradients(rng):
    a0, b0 = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))

    def run():
        a, b = Tensor(a0.copy(), requires_grad=True), Tensor(b0.copy(), requires_grad=True)
        with Tape():
            loss = ad.reduce_sum(ad.softmax(ad.linear(a, b), axis=1) * ad.tanh(ad.linear(a, b)))
        ad.backward(loss)
        return loss.data, a.grad, b.grad
    r1, r2 = run(), run()
    assert all(np.array_equal(u, v) for u, v in zip(r1, r2))


def test_no_recording_without_tape(rng):
    x = param(rng, 2)
    ad.exp(x)
    with Tape() as tape:
        ad.exp(x)
        ad.exp(Tensor([1.0]))  # constant input: nothing to record
    assert len(tape) == 1


def test_debug_mode_raises_on_non_finite():
    ad.set_debug(True)
    try:
        with pytest.raises(FloatingPointError), np.errstate(over="ignore"):
            ad.exp(Tensor([1000.0]))
    finally:
        ad.set_debug(False)
    with np.errstate(over="ignore"):
        assert np.isinf(ad.exp(Tensor([1000.0])).data[0])  # release mode propagates
