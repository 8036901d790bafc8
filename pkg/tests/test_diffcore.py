import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from carfollow import diffcore as dc


def test_forward_examples():
    g = dc.Graph(lambda x, y: x * y)
    assert dc.forward(g, {"x": 3.0, "y": 4.0}) == 12.0
    assert dc.backward(g) == {"x": 4.0, "y": 3.0}
    assert dc.logsumexp(dc.constant([0.0, 0.0])).value == pytest.approx(np.log(2), abs=1e-15)
    np.testing.assert_allclose(dc.softmax(dc.constant([1.0, 1.0, 1.0])).value, [1 / 3] * 3, atol=1e-15)


def test_square_gradient():
    val, grads = dc.value_and_grad(lambda x: x * x, {"x": np.array(3.0)})
    assert val == 9.0 and grads["x"] == 6.0


def test_graph_errors():
    g = dc.Graph(lambda x, y: x + y)
    with pytest.raises(dc.DiffError, match="unbound"):
        dc.forward(g, {"x": 1.0})
    with pytest.raises(dc.DiffError, match="unknown"):
        dc.forward(g, {"x": 1.0, "y": 2.0, "z": 0.0})
    with pytest.raises(dc.DiffError, match="shape"):
        dc.forward(g, {"x": np.ones(3), "y": np.ones(4)})
    with pytest.raises(dc.DiffError, match="before forward"):
        dc.backward(dc.Graph(lambda x: x))
    with pytest.raises(dc.DiffError, match="scalar"):
        dc.tensor(np.ones(3)).backward()


def test_belief_recursion_loglik_matches_finite_differences():
    rng = np.random.default_rng(3)
    obs_ll = rng.normal(size=(6, 2))

    def f(logits):
        trans = dc.log_softmax(dc.reshape(logits, (2, 2)), axis=-1)
        log_b = dc.constant(np.log([0.5, 0.5]))
        total = 0.0
        for t in range(len(obs_ll)):
            prior = dc.logsumexp(dc.reshape(log_b, (2, 1)) + trans, axis=0)
            joint = prior + obs_ll[t]
            z = dc.logsumexp(joint)
            log_b = joint - z
            total = total + z
        return total

    assert dc.grad_check(f, rng.normal(size=4)) < 1e-6


def test_grad_check_examples():
    assert dc.grad_check(dc.sin, np.array(1.0)) < 1e-8
    rng = np.random.default_rng(0)
    target = 2

    def xent(z):
        return -dc.log_softmax(z)[target]

    assert dc.grad_check(xent, rng.normal(size=5)) < 1e-6
    assert dc.grad_check(dc.absolute, np.array(0.0)) == float("inf")


def test_adam_examples():
    p = {"x": np.array([1.0, -2.0])}
    new, _ = dc.opt_step(p, {"x": np.zeros(2)}, dc.OptimState())
    np.testing.assert_array_equal(new["x"], p["x"])

    state = dc.OptimState(lr=1e-2)
    x = {"x": np.array(0.0)}
    for _ in range(200):
        prev = x["x"]
        x, state = dc.opt_step(x, {"x": np.array(3.0)}, state)
    assert x["x"] - prev == pytest.approx(-1e-2, rel=1e-6)

    state = dc.OptimState(lr=1e-2)
    x = {"x": np.array(0.0)}
    for _ in range(2000):
        x, state = dc.opt_step(x, {"x": 2 * (x["x"] - 2.0)}, state)
    assert abs(x["x"] - 2.0) < 1e-3


def test_adam_errors():
    with pytest.raises(FloatingPointError):
        dc.opt_step({"x": np.zeros(2)}, {"x": np.array([np.nan, 0.0])}, dc.OptimState())
    with pytest.raises(dc.DiffError):
        dc.opt_step({"x": np.zeros(2)}, {"x": np.zeros(3)}, dc.OptimState())


# every differentiable primitive, as a scalar function of a small random input
UNARY = {
    "exp": lambda x: dc.tsum(dc.exp(x)),
    "log": lambda x: dc.tsum(dc.log(x * x + 1.0)),
    "sqrt": lambda x: dc.tsum(dc.sqrt(x * x + 1.0)),
    "sin": lambda x: dc.tsum(dc.sin(x)),
    "cos": lambda x: dc.tsum(dc.cos(x)),
    "tanh": lambda x: dc.tsum(dc.tanh(x)),
    "sigmoid": lambda x: dc.tsum(dc.sigmoid(x)),
    "softplus": lambda x: dc.tsum(dc.softplus(x)),
    "square": lambda x: dc.tsum(dc.square(x)),
    "power": lambda x: dc.tsum(dc.power(x * x + 1.0, 1.5)),
    "div": lambda x: dc.tsum(1.0 / (x * x + 1.0)),
    "mean": lambda x: dc.mean(x * x),
    "reshape_T": lambda x: dc.tsum(dc.reshape(x, (2, 3)).T @ np.arange(2.0)),
    "getitem": lambda x: dc.tsum(x[np.array([0, 0, 3])] * np.array([1.0, 2.0, 3.0])),
    "stack": lambda x: dc.tsum(dc.stack([x, x * x]) ** 2),
    "concat": lambda x: dc.tsum(dc.concatenate([x, dc.sin(x)]) ** 2),
    "matmul": lambda x: dc.tsum(dc.reshape(x, (2, 3)) @ dc.reshape(x, (3, 2))),
    "einsum": lambda x: dc.tsum(dc.einsum("ij,jk->ik", dc.reshape(x, (2, 3)), dc.reshape(x, (3, 2)))),
    "logsumexp": lambda x: dc.logsumexp(x),
    "log_softmax": lambda x: dc.tsum(dc.log_softmax(x) * np.arange(6.0)),
    "softmax": lambda x: dc.tsum(dc.softmax(x) * np.arange(6.0)),
    "where": lambda x: dc.tsum(dc.where(np.arange(6) % 2 == 0, x * x, dc.exp(x))),
    "relu": lambda x: dc.tsum(dc.relu(x) * 3.0),
    "abs": lambda x: dc.tsum(dc.absolute(x) * 2.0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_grad_check_every_primitive(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    errs = []
    for _ in range(100):
        x = rng.normal(size=6)
        if name in ("relu", "abs"):
            x = np.where(np.abs(x) < 1e-2, 0.5, x)  # stay away from the kink
        errs.append(dc.grad_check(UNARY[name], x))
    assert max(errs) < 1e-5


finite = arrays(np.float64, 4, elements=st.floats(-3, 3))


@given(finite, st.floats(-2, 2), st.floats(-2, 2))
@settings(max_examples=50, deadline=None)
def test_backward_is_linear(x, alpha, beta):
    def f(t):
        return dc.tsum(dc.sin(t) * t)

    def g(t):
        return dc.logsumexp(t * 2.0)

    _, gf = dc.value_and_grad(f, {"t": x})
    _, gg = dc.value_and_grad(g, {"t": x})
    _, gh = dc.value_and_grad(lambda t: alpha * f(t) + beta * g(t), {"t": x})
    np.testing.assert_allclose(gh["t"], alpha * gf["t"] + beta * gg["t"], atol=1e-10)


@given(arrays(np.float64, 6, elements=st.floats(-3, 3)))
@settings(max_examples=25, deadline=None)
def test_deterministic(x):
    f = UNARY["matmul"]
    a = dc.value_and_grad(f, {"x": x})
    b = dc.value_and_grad(f, {"x": x})
    assert a[0] == b[0]
    assert np.array_equal(a[1]["x"], b[1]["x"])


def test_unbroadcast_and_reuse():
    # a leaf used twice with broadcasting accumulates both paths
    val, g = dc.value_and_grad(lambda a, b: dc.tsum(a * b + a), {"a": np.array(2.0), "b": np.ones((3, 2))})
    assert val == 24.0
    assert g["a"] == pytest.approx(12.0)
    np.testing.assert_allclose(g["b"], np.full((3, 2), 2.0))


def test_matmul_batched_vector_gradient():
    rng = np.random.default_rng(1)
    m = rng.normal(size=(3, 4, 5))
    assert dc.grad_check(lambda v: dc.tsum(dc.constant(m) @ v), rng.normal(size=5)) < 1e-7
    assert dc.grad_check(lambda a: dc.tsum(dc.reshape(a, (3, 4, 5)) @ np.arange(5.0)), m.ravel()) < 1e-7
