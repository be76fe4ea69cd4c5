import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from driftbench import tensor as tn
from driftbench.errors import ConfigError, ContractError, NumericError, ShapeError
from driftbench.tensor import Tensor

from gradcheck import check_op

rng_fixed = np.random.default_rng(99).normal(size=(5, 3))


def test_matmul_identity():
    v = Tensor([[1.0], [2.0], [3.0]])
    assert np.array_equal(tn.matmul(np.eye(3), v).data, v.data)


def test_matmul_hand_arithmetic():
    out = tn.matmul([[1.0, 2.0], [3.0, 4.0]], [[1.0], [1.0]])
    assert out.data.tolist() == [[3.0], [7.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        tn.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_gradient_vs_finite_difference():
    rng = np.random.default_rng(1)
    err = check_op(lambda t: (tn.matmul(t[0], t[1]) * tn.Tensor(rng_fixed)).sum(), [(5, 7), (7, 3)], rng)
    assert err < 1e-6


def test_sigmoid_zero():
    assert tn.sigmoid(0.0).item() == 0.5


def test_sigmoid_extremes_stay_finite():
    out = tn.sigmoid(np.array([-800.0, 800.0])).data
    assert out[0] == pytest.approx(0.0) and out[1] == 1.0


def test_relu_definition():
    assert tn.relu([-1.0, 0.0, 2.0]).data.tolist() == [0.0, 0.0, 2.0]


def test_tanh_gradient_at_point():
    x = Tensor([0.3], requires_grad=True)
    tn.backward(tn.tanh(x).sum())
    h = 1e-4
    fd = (np.tanh(0.3 + h) - np.tanh(0.3 - h)) / (2 * h)
    assert abs(x.grad[0] - fd) / abs(fd) < 1e-6


def test_elementwise_dispatch():
    assert tn.elementwise("mul", [2.0], [3.0]).data.tolist() == [6.0]
    with pytest.raises(ConfigError):
        tn.elementwise("pow", [1.0])


@pytest.mark.parametrize("op", ["add", "sub", "mul"])
def test_binary_gradients(op):
    rng = np.random.default_rng(2)
    fn = getattr(tn, op)
    err = check_op(lambda t: (fn(t[0], t[1]) * fn(t[0], t[1])).sum(), [(4, 3), (4, 3)], rng)
    assert err < 1e-6


@pytest.mark.parametrize("op", ["sigmoid", "tanh", "relu"])
def test_unary_gradients(op):
    rng = np.random.default_rng(3)
    fn = getattr(tn, op)
    err = check_op(lambda t: (fn(t[0]) * fn(t[0])).sum(), [(6, 2)], rng, low=0.05, high=2.0)
    assert err < 1e-6


def test_broadcast_bias_gradient():
    rng = np.random.default_rng(4)
    err = check_op(lambda t: tn.tanh(t[0] + t[1]).sum(), [(5, 3), (3,)], rng)
    assert err < 1e-6


def test_structural_gradients():
    rng = np.random.default_rng(5)

    def build(t):
        c = tn.concat([t[0], t[1]], axis=1)
        return (tn.tanh(c[:, 1:4]).reshape(6) * tn.Tensor(np.arange(6.0))).sum() + tn.mean(t[0].T)

    assert check_op(build, [(2, 2), (2, 3)], rng) < 1e-6


def test_softmax_cross_entropy_uniform():
    loss = tn.softmax_cross_entropy(np.zeros(8), 3)
    assert loss.item() == pytest.approx(np.log(8.0), abs=1e-15)


def test_softmax_cross_entropy_confident():
    loss = tn.softmax_cross_entropy([10.0, -10.0], 0).item()
    assert loss == pytest.approx(np.log1p(np.exp(-20.0)), rel=1e-12)
    assert loss == pytest.approx(2.06e-9, rel=1e-2)


def test_softmax_cross_entropy_gradient():
    rng = np.random.default_rng(6)
    err = check_op(lambda t: tn.softmax_cross_entropy(t[0], 2), [(5,)], rng, low=-3, high=3)
    assert err < 1e-6


def test_softmax_cross_entropy_batch_gradient():
    rng = np.random.default_rng(7)
    labels = np.array([0, 2, 1, 2])
    err = check_op(lambda t: tn.softmax_cross_entropy(t[0], labels).mean(), [(4, 3)], rng, low=-3, high=3)
    assert err < 1e-6


def test_softmax_cross_entropy_bad_class():
    with pytest.raises(IndexError):
        tn.softmax_cross_entropy(np.zeros(3), 3)
    with pytest.raises(IndexError):
        tn.softmax_cross_entropy(np.zeros(3), -1)


def test_backward_linear_and_quadratic():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    tn.backward(x.sum())
    assert x.grad.tolist() == [1.0, 1.0, 1.0]
    y = Tensor([1.0, 2.0], requires_grad=True)
    tn.backward((y * y).sum())
    assert y.grad.tolist() == [2.0, 4.0]


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        tn.backward(x * 2.0)
    tn.current_tape().clear()


def test_backward_clears_tape():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = tn.tanh(x).sum()
    assert len(tn.current_tape()) == 2
    tn.backward(loss)
    assert len(tn.current_tape()) == 0


def test_tape_replays_in_reverse_order():
    x = Tensor([0.5], requires_grad=True)
    a = tn.sigmoid(x)
    b = tn.tanh(a)
    loss = tn.relu(b).sum()
    tape = tn.current_tape()
    names = [node.name for node in tape.nodes]
    assert names == ["sigmoid", "tanh", "relu", "sum"]

    seen = []
    for node in tape.nodes:
        inner = node.backward

        def spy(g, needs, inner=inner, name=node.name):
            seen.append(name)
            return inner(g, needs)

        node.backward = spy
    tn.backward(loss)
    assert seen == names[::-1]


def test_shared_input_gradients_do_not_alias():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([3.0, 4.0], requires_grad=True)
    s = a + b
    tn.backward((s * a).sum())
    # d/da = s + a, d/db = a
    assert a.grad.tolist() == [5.0, 8.0]
    assert b.grad.tolist() == [1.0, 2.0]


def test_frozen_leaf_gets_no_grad():
    w = Tensor([2.0])
    x = Tensor([3.0], requires_grad=True)
    tn.backward((w * x).sum())
    assert w.grad is None
    assert x.grad.tolist() == [2.0]


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with tn.no_grad():
        y = tn.tanh(x)
    assert not y.requires_grad
    assert len(tn.current_tape()) == 0


def test_non_finite_output_raises():
    with pytest.raises(NumericError):
        with np.errstate(over="ignore"):
            tn.mul([1e308], [1e308])
    with pytest.raises(NumericError):
        Tensor([np.nan])


def test_dropout_eval_and_zero_p_are_identity():
    x = Tensor(np.arange(5.0))
    rng = np.random.default_rng(0)
    assert tn.dropout(x, 0.5, "eval", rng) is x
    assert np.array_equal(tn.dropout(x, 0.0, "train", rng).data, x.data)


def test_dropout_mean_is_preserved():
    rng = np.random.default_rng(0)
    out = tn.dropout(Tensor(np.ones(100_000)), 0.5, "train", rng).data
    assert abs(out.mean() - 1.0) < 0.02
    assert set(np.unique(out)) == {0.0, 2.0}


def test_dropout_rejects_p_one():
    with pytest.raises(ConfigError):
        tn.dropout(Tensor([1.0]), 1.0, "train", np.random.default_rng(0))


def test_dropout_gradient_uses_mask():
    x = Tensor(np.ones(1000), requires_grad=True)
    y = tn.dropout(x, 0.3, "train", np.random.default_rng(1))
    tn.backward(y.sum())
    assert np.array_equal(x.grad, y.data)


def test_seeded_computation_is_bitwise_reproducible():
    def run():
        rng = np.random.default_rng(42)
        w = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
        x = Tensor(rng.normal(size=(3, 6)))
        h = tn.dropout(tn.tanh(x @ w), 0.5, "train", rng)
        tn.backward(tn.softmax_cross_entropy(h, np.array([0, 1, 3])).mean())
        return h.data.tobytes(), w.grad.tobytes()

    assert run() == run()


def test_independent_tapes_per_thread():
    results = {}

    def worker(k):
        x = Tensor([float(k)], requires_grad=True)
        loss = (x * x).sum()
        results[k] = len(tn.current_tape())
        tn.backward(loss)
        results[(k, "grad")] = x.grad[0]

    threads = [threading.Thread(target=worker, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for k in range(4):
        assert results[k] == 2
        assert results[(k, "grad")] == 2.0 * k


logits_strategy = st.lists(st.floats(-50, 50), min_size=2, max_size=10)


@given(logits_strategy)
def test_softmax_is_a_distribution(values):
    p = tn.softmax(np.array(values))
    assert abs(p.sum() - 1.0) < 1e-9
    assert np.all(p > 0)


@settings(max_examples=25, deadline=None)
@given(
    st.integers(1, 4),
    st.integers(1, 4),
    st.integers(1, 4),
    st.integers(0, 2**31 - 1),
)
def test_random_graph_matches_finite_differences(m, k, n, seed):
    rng = np.random.default_rng(seed)

    def build(t):
        z = tn.sigmoid(t[0] @ t[1] + t[2])
        return (tn.tanh(z) * z - tn.relu(z * 0.5) + z).mean()

    assert check_op(build, [(m, k), (k, n), (n,)], rng) < 1e-4


def _granular_cell(W, b, x, h, C):
    H = h.shape[-1]
    z = tn.concat([h, x], axis=-1) @ W + b
    f = tn.sigmoid(z[..., :H])
    i = tn.sigmoid(z[..., H:2 * H])
    g = tn.tanh(z[..., 2 * H:3 * H])
    o = tn.sigmoid(z[..., 3 * H:])
    c_new = f * C + i * g
    return tn.concat([o * tn.tanh(c_new), c_new], axis=-1)


def test_fused_lstm_cell_matches_granular_ops():
    rng = np.random.default_rng(8)
    args = [rng.normal(size=s) for s in [(5, 12), (12,), (2, 2), (2, 3), (2, 3)]]
    fused = tn.lstm_cell(*args).data
    ref = _granular_cell(*[Tensor(a) for a in args]).data
    assert np.allclose(fused, ref, rtol=0, atol=1e-14)


def test_fused_lstm_cell_gradient_vs_finite_difference():
    rng = np.random.default_rng(9)
    weights = Tensor(rng.normal(size=(2, 6)))

    def build(t):
        return (tn.lstm_cell(*t) * weights).sum()

    assert check_op(build, [(5, 12), (12,), (2, 2), (2, 3), (2, 3)], rng) < 1e-6


def test_fused_lstm_cell_rejects_bad_shapes():
    with pytest.raises(ShapeError):
        tn.lstm_cell(np.zeros((4, 12)), np.zeros(12), np.zeros(2), np.zeros(3), np.zeros(3))
