import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stransformer.numerics import (AdamState, AllMaskedRowError, ShapeError, Tensor,
                                   TrainingDivergenceError, adam_step, bce_with_logits, concat,
                                   dropout, embedding, exp, grad_check, layer_norm, linear, log,
                                   matmul, mean, mul, no_grad, parameter, relu, reshape, sigmoid,
                                   softmax_lastdim, square, stop_gradient, tabs, tanh, transpose)
from stransformer.numerics import tensor as tensor_mod


def rand_param(rng, *shape, name="p"):
    return parameter(rng.normal(size=shape), name)


# ------------------------------------------------------------------ matmul
def test_matmul_identity():
    m = np.arange(9.0).reshape(3, 3)
    np.testing.assert_array_equal(matmul(Tensor(np.eye(3)), Tensor(m)).data, m)


def test_matmul_hand_arithmetic():
    out = matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]]))
    np.testing.assert_array_equal(out.data, [[3], [7]])


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a, b = rand_param(rng, 4, 5, name="a"), rand_param(rng, 5, 2, name="b")
    w = rng.normal(size=(4, 2))
    err = grad_check(lambda: (matmul(a, b) * w).sum(), {"a": a, "b": b}, eps=1e-6,
                     n_samples=None)
    assert err < 1e-6


def test_matmul_batched_broadcast_gradient():
    rng = np.random.default_rng(1)
    a, b = rand_param(rng, 3, 4, 5, name="a"), rand_param(rng, 5, 2, name="b")
    w = rng.normal(size=(3, 4, 2))
    assert grad_check(lambda: (matmul(a, b) * w).sum(), {"a": a, "b": b},
                      n_samples=None) < 1e-6


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# ----------------------------------------------------------------- softmax
def test_softmax_uniform():
    np.testing.assert_allclose(softmax_lastdim(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3,
                               rtol=0, atol=1e-15)


def test_softmax_mask_gives_exact_zero():
    out = softmax_lastdim(Tensor([5.0, -np.inf])).data
    assert out[0] == 1.0 and out[1] == 0.0


def test_softmax_direct_evaluation():
    e = np.exp([1.0, 2.0, 3.0])
    expected = e / e.sum()
    np.testing.assert_allclose(expected, [0.09003, 0.24473, 0.66524], atol=5e-6)
    np.testing.assert_allclose(softmax_lastdim(Tensor([1.0, 2.0, 3.0])).data, expected,
                               rtol=1e-14)


def test_softmax_all_masked_row_raises():
    with pytest.raises(AllMaskedRowError):
        softmax_lastdim(Tensor([[0.0, 1.0], [-np.inf, -np.inf]]))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 7), st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one(rows, cols, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=20.0, size=(rows, cols))
    masked = rng.random((rows, cols)) < 0.3
    masked[:, rng.integers(cols)] = False
    x[masked] = -np.inf
    out = softmax_lastdim(Tensor(x)).data
    assert np.all(out >= 0)
    assert np.all(out[masked] == 0)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


# ------------------------------------------------------------ stop_gradient
def test_stop_gradient_blocks_input_gradient():
    x = parameter([1.0, -2.0, 3.0], "x")
    w = parameter([0.5, 0.25, 2.0], "w")
    (stop_gradient(x) * w).sum().backward()
    assert x.grad is None
    np.testing.assert_array_equal(w.grad, x.data)


def test_stop_gradient_forward_identity():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    np.testing.assert_array_equal(stop_gradient(x).data, x.data)


def test_stop_gradient_leaves_upstream_graph_untouched():
    rng = np.random.default_rng(3)
    w = rand_param(rng, 4, 4, name="w")
    h = relu(matmul(Tensor(rng.normal(size=(2, 4))), w))
    cut = stop_gradient(h)
    v = rand_param(rng, 4, 1, name="v")
    matmul(cut, v).sum().backward()
    assert w.grad is None and h.grad is None
    assert v.grad is not None


# --------------------------------------------------------------- layer_norm
def test_layer_norm_constant_row_is_zero():
    out = layer_norm(Tensor(np.full((1, 4), 7.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, np.zeros((1, 4)))


def test_layer_norm_hand_arithmetic():
    out = layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-15)
    np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-12)


def test_layer_norm_gradient():
    rng = np.random.default_rng(4)
    x, g, b = rand_param(rng, 3, 5, name="x"), rand_param(rng, 5, name="g"), rand_param(rng, 5, name="b")
    w = rng.normal(size=(3, 5))
    err = grad_check(lambda: (layer_norm(x, g, b) * w).sum(), {"x": x, "g": g, "b": b},
                     n_samples=None)
    assert err < 1e-5


# -------------------------------------------------- every primitive, seeded
PRIMITIVES = {
    "add": lambda p, r: p["a"] + p["b"],
    "sub_broadcast": lambda p, r: p["a"] - p["c"],
    "mul": lambda p, r: p["a"] * p["b"],
    "div": lambda p, r: p["a"] / (square(p["b"]) + 1.0),
    "exp": lambda p, r: exp(p["a"] * 0.3),
    "log": lambda p, r: log(square(p["a"]) + 0.5),
    "square": lambda p, r: square(p["a"]),
    "abs": lambda p, r: tabs(p["a"]),
    "relu": lambda p, r: relu(p["a"]),
    "sigmoid": lambda p, r: sigmoid(p["a"]),
    "tanh": lambda p, r: tanh(p["a"]),
    "mean_axis": lambda p, r: mean(p["a"], axis=0),
    "reshape": lambda p, r: reshape(p["a"], (4, 3)),
    "transpose": lambda p, r: transpose(reshape(p["a"], (2, 2, 3)), (2, 0, 1)),
    "getitem": lambda p, r: p["a"][1:, ::2],
    "concat": lambda p, r: concat([p["a"], p["b"]], axis=0),
    "matmul": lambda p, r: matmul(p["a"], transpose(p["b"])),
    "linear": lambda p, r: linear(p["a"], p["b"], p["c"][0, :3]),
    "softmax": lambda p, r: softmax_lastdim(p["a"]),
    "layer_norm": lambda p, r: layer_norm(p["a"], p["c"][0] + 1.0, p["c"][0]),
    "embedding": lambda p, r: embedding(p["a"], [2, 0, 2]),
    "bce": lambda p, r: bce_with_logits(reshape(p["a"], (12,)),
                                        (np.arange(12) % 3 == 0).astype(float), 4.0),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradcheck(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    params = {"a": rand_param(rng, 3, 4, name="a"), "b": rand_param(rng, 3, 4, name="b"),
              "c": rand_param(rng, 1, 4, name="c")}
    weights = np.random.default_rng(5)
    out_shape = PRIMITIVES[name](params, None).shape
    w = weights.normal(size=out_shape)
    err = grad_check(lambda: (PRIMITIVES[name](params, None) * w).sum(), params, eps=1e-6,
                     n_samples=None)
    assert err < 1e-5, name


def test_bce_matches_direct_formula():
    z = np.array([-3.0, 0.2, 4.0])
    t = np.array([0.0, 1.0, 1.0])
    p = 1 / (1 + np.exp(-z))
    direct = -(2.0 * t * np.log(p) + (1 - t) * np.log(1 - p)).mean()
    assert bce_with_logits(Tensor(z), t, 2.0).item() == pytest.approx(direct, rel=1e-12)


def test_dropout_is_seeded_and_disabled_in_eval():
    x = Tensor(np.ones((4, 5)))
    a = dropout(x, 0.5, np.random.default_rng(1)).data
    b = dropout(x, 0.5, np.random.default_rng(1)).data
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 2.0}
    assert dropout(x, 0.5, np.random.default_rng(1), training=False) is x


def test_no_grad_records_nothing():
    p = parameter([1.0, 2.0])
    with no_grad():
        out = (p * 3.0).sum()
    assert not out.requires_grad and out.is_leaf


def test_backward_visits_shared_node_once():
    p = parameter([2.0], "p")
    y = p * p          # shared by both branches below
    z = y + y * 3.0
    z.sum().backward()
    # dz/dp = 4 * 2p
    np.testing.assert_allclose(p.grad, [16.0])


def test_determinism_forward_backward_bitwise():
    def run():
        rng = np.random.default_rng(11)
        w = rand_param(rng, 6, 6, name="w")
        x = Tensor(rng.normal(size=(5, 6)))
        out = softmax_lastdim(layer_norm(linear(x, w), Tensor(np.ones(6)), Tensor(np.zeros(6))))
        loss = (out * rng.normal(size=out.shape)).sum()
        loss.backward()
        return loss.data.copy(), w.grad.copy()

    (l1, g1), (l2, g2) = run(), run()
    assert l1.tobytes() == l2.tobytes() and g1.tobytes() == g2.tobytes()


# --------------------------------------------------------------------- adam
def test_adam_zero_gradient_leaves_params():
    p = parameter([1.0, -1.0])
    adam_step({"p": p}, {"p": np.zeros(2)}, AdamState(lr=0.1))
    np.testing.assert_array_equal(p.data, [1.0, -1.0])


def test_adam_first_step_closed_form():
    p = parameter([0.0])
    state = AdamState(lr=0.1)
    adam_step({"p": p}, {"p": np.ones(1)}, state)
    # m_hat = v_hat = 1  ->  delta = -lr / (1 + eps)
    assert p.data[0] == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-12)
    assert state.step == 1


def test_adam_minimizes_quadratic():
    theta = parameter([1.0])
    state = AdamState(lr=0.01)
    for _ in range(100):
        theta.grad = None
        square(theta).sum().backward()
        adam_step({"t": theta}, {"t": theta.grad}, state)
    assert abs(theta.data[0]) < 0.5


def test_adam_rejects_nonfinite_gradient_by_name():
    p = parameter([0.0])
    with pytest.raises(TrainingDivergenceError, match="weights"):
        adam_step({"weights": p}, {"weights": np.array([np.nan])}, AdamState())


def test_learning_rate_schedule():
    s = AdamState(lr=1.0, warmup_steps=10, decay=0.5, decay_interval=100)
    assert s.rate(5) == pytest.approx(0.5 * 0.5 ** 0.05)
    assert s.rate(100) == pytest.approx(0.5)


# ---------------------------------------------------------------- gradcheck
def test_gradcheck_exact_for_linear_function():
    p = parameter(np.random.default_rng(0).normal(size=7))
    c = np.arange(7.0)
    assert grad_check(lambda: (p * c).sum(), {"p": p}, n_samples=None) < 1e-9


def test_gradcheck_detects_wrong_backward_rule():
    def bad_square(x):
        return tensor_mod._make(x.data ** 2, (x,), lambda g: x._accumulate(g * x.data))

    p = parameter([0.7, -1.3, 2.0])
    assert grad_check(lambda: bad_square(p).sum(), {"p": p}, n_samples=None) > 1e-2


def test_gradcheck_rejects_eps_out_of_range():
    p = parameter([1.0])
    with pytest.raises(ValueError):
        grad_check(lambda: p.sum(), {"p": p}, eps=1e-9)
