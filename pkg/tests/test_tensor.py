import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from medvlbert import tensor as T
from medvlbert.errors import ContractError, DimensionError
from medvlbert.optim import AdamState, adam_step, clip_grad_norm
from medvlbert.tensor import Tensor

from oracles import numeric_grad, rel_err


def check_grad(build, shapes, seed, h=1e-6, tol=1e-6, positive=False):
    """Compare analytic gradients of ``build(*tensors)`` (a scalar) with central differences."""
    rng = np.random.default_rng(seed)
    with T.default_dtype(np.float64):
        arrays = [rng.normal(size=s) for s in shapes]
        if positive:
            arrays = [np.abs(a) + 0.5 for a in arrays]
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        T.backward(build(*leaves))
        for leaf in leaves:
            num = numeric_grad(lambda: build(*leaves).data, leaf.data, h)
            assert rel_err(leaf.grad, num) <= tol


# -- forward examples -------------------------------------------------------------------

def test_matmul_identity():
    a = Tensor(np.eye(2)) @ Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(a.data, [[1, 2], [3, 4]])


def test_matmul_orthogonal_rows():
    assert (Tensor([[1.0, 0.0]]) @ Tensor([[0.0], [1.0]])).data.tolist() == [[0.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(3, 4\).*\(3, 2\)"):
        Tensor(np.ones((3, 4))) @ Tensor(np.ones((3, 2)))


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    with T.default_dtype(np.float64):
        big = T.softmax(Tensor([1000.0, 0.0])).data
        assert abs(big[0] - 1.0) <= 1e-9 and big[1] <= 1e-9 and np.isfinite(big).all()
        thirds = T.softmax(Tensor(np.log([1.0, 2.0, 3.0]))).data
    np.testing.assert_allclose(thirds, [1 / 6, 2 / 6, 3 / 6], atol=1e-12)


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(4)), Tensor(np.zeros(4))
    np.testing.assert_array_equal(T.layer_norm(Tensor(np.full((1, 4), 3.0)), one, zero).data, 0.0)
    with T.default_dtype(np.float64):
        out = T.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12).data
    np.testing.assert_allclose(out, [[1.0, -1.0]], atol=1e-9)


def test_backward_sum_and_quadratic():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    x.zero_grad()
    ((x * x) * 0.5).sum().backward()
    np.testing.assert_array_equal(x.grad, x.data)


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2).backward()


def test_stale_gradients_refused_unless_accumulating():
    x = Tensor(np.ones(2), requires_grad=True)
    x.sum().backward()
    with pytest.raises(ContractError, match="zero_grad"):
        x.sum().backward()
    (x * 2).sum().backward(accumulate=True)
    np.testing.assert_array_equal(x.grad, [3.0, 3.0])


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = (x * 3).sum()
    assert not y.requires_grad
    with pytest.raises(ContractError):
        y.backward()


def test_embedding_out_of_range():
    with pytest.raises(ContractError):
        T.embedding(Tensor(np.ones((4, 2))), [0, 4])


def test_default_dtype_is_float32():
    assert Tensor([1.0]).dtype == np.float32
    with T.default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


# -- gradient checks over many seeds ------------------------------------------------------

W = np.random.default_rng(123).normal(size=(3, 2))

OPS = {
    "matmul": (lambda a, b: (a @ b).sum(), [(3, 4), (4, 2)], False),
    "batched_matmul": (lambda a, b: ((a @ b) * Tensor(np.arange(12.0).reshape(2, 3, 2))).sum(), [(2, 3, 4), (4, 2)], False),
    "add_broadcast": (lambda a, b: ((a + b) * (a + b)).sum(), [(3, 4), (4,)], False),
    "sub_mul": (lambda a, b: ((a - b) * a).sum(), [(2, 3), (2, 3)], False),
    "div": (lambda a, b: (a / b).sum(), [(2, 3), (2, 3)], True),
    "exp_log": (lambda a: (T.log(a) + T.exp(a * 0.3)).sum(), [(2, 3)], True),
    "relu": (lambda a: (T.relu(a) * a).sum(), [(3, 3)], False),
    "sigmoid": (lambda a: (T.sigmoid(a) * a).sum(), [(4,)], False),
    "softmax": (lambda a: (T.softmax(a, -1) * Tensor(np.arange(4.0))).sum(), [(3, 4)], False),
    "log_softmax": (lambda a: (T.log_softmax(a, 0) * Tensor(np.arange(12.0).reshape(3, 4))).sum(), [(3, 4)], False),
    "layer_norm": (
        lambda x, g, b: (T.layer_norm(x, g, b) * Tensor(np.arange(8.0).reshape(2, 4))).sum(),
        [(2, 4), (4,), (4,)],
        False,
    ),
    "mean_reshape_transpose": (lambda a: (a.reshape(3, 2).transpose() * a.mean(axis=0, keepdims=True)).sum() * a.mean(), [(2, 3)], False),
    "getitem_concat": (lambda a, b: (T.concat([a[:, 1:], b], axis=1) * T.concat([a[:, 1:], b], axis=1)).sum(), [(2, 3), (2, 2)], False),
    "fancy_index": (lambda a: (a[np.array([0, 2, 0])] * Tensor(W)).sum(), [(3, 2)], False),
    "masked_fill": (lambda a: T.softmax(T.masked_fill(a, np.array([[False, True, False]]), -np.inf), -1)[:, 0].sum(), [(2, 3)], False),
    "bce_with_logits": (lambda a: T.bce_with_logits(a, np.array([1, 0, 1, 0])).sum(), [(4,)], False),
    "cross_entropy": (lambda a: T.cross_entropy(a, np.array([[1, 0, 2]]), ignore_index=0).sum(), [(1, 3, 4)], False),
    "embedding": (lambda t: (T.embedding(t, [[1, 1, 3]]) * Tensor(np.arange(6.0).reshape(1, 3, 2))).sum(), [(4, 2)], False),
    "cast": (lambda a: (T.cast(a, np.float64) * T.cast(a, np.float64)).sum(), [(2, 3)], False),
    "broadcast_to": (lambda a: (T.broadcast_to(a, (3, 2, 2)) * Tensor(np.arange(12.0).reshape(3, 2, 2))).sum(), [(1, 2, 2)], False),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_float64_100_seeds(name):
    build, shapes, positive = OPS[name]
    for seed in range(100):
        check_grad(build, shapes, seed, h=1e-6, tol=1e-6, positive=positive)


@pytest.mark.parametrize("name", ["matmul", "softmax", "layer_norm", "cross_entropy"])
def test_op_gradients_float32(name):
    build, shapes, positive = OPS[name]
    rng = np.random.default_rng(7)
    for _ in range(100):
        arrays = [rng.normal(size=s).astype(np.float32) for s in shapes]
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        T.backward(build(*leaves))
        for leaf in leaves:
            # float32 forward, float64 accumulation of the difference quotient
            num = numeric_grad(lambda: np.float64(build(*leaves).data), leaf.data, 1e-3)
            assert rel_err(leaf.grad, num) <= 1e-2


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_matmul_grad_property(m, k, n, seed):
    check_grad(lambda a, b: ((a @ b) * (a @ b)).sum(), [(m, k), (k, n)], seed)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_softmax_is_a_distribution(values):
    p = T.softmax(Tensor(values)).data
    assert (p >= 0).all() and abs(float(p.sum()) - 1.0) <= 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_composed_graph_finite_and_deterministic(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 4)).astype(np.float32) * 10
    w = rng.normal(size=(4, 4)).astype(np.float32)

    def run():
        a, b = Tensor(x, requires_grad=True), Tensor(w, requires_grad=True)
        out = T.log_softmax(T.layer_norm(T.relu(a @ b), Tensor(np.ones(4)), Tensor(np.zeros(4))), -1).sum()
        out.backward()
        return out.data, a.grad, b.grad

    first, second = run(), run()
    for u, v in zip(first, second):
        assert np.isfinite(u).all()
        assert np.array_equal(u, v)


# -- optimizer ----------------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.zeros(2, dtype=np.float32)
    state = AdamState()
    adam_step({"p": p}, state)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert state.step_count == 1


def test_adam_first_step_moves_by_lr():
    with T.default_dtype(np.float64):
        p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([1.0])
    adam_step({"p": p}, AdamState(learning_rate=0.1))
    # m̂ = 1, v̂ = 1, so the step is lr / (1 + eps)
    assert abs(p.data[0] - (1.0 - 0.1 / (1 + 1e-8))) <= 1e-12


def test_adam_hand_evaluated_two_steps():
    with T.default_dtype(np.float64):
        p = Tensor(np.array([0.5]), requires_grad=True)
    state = AdamState(learning_rate=0.01)
    m = v = 0.0
    w = 0.5
    for t, g in enumerate([0.3, -0.2], start=1):
        p.grad = np.array([g])
        adam_step({"p": p}, state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w -= 0.01 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert abs(p.data[0] - w) <= 1e-12
    assert state.step_count == 2


def test_adam_converges_on_quadratic():
    with T.default_dtype(np.float64):
        w = Tensor(np.array([0.0]), requires_grad=True)
        state = AdamState(learning_rate=0.05)
        for _ in range(1000):
            w.zero_grad()
            ((w - 3.0) * (w - 3.0)).sum().backward()
            adam_step({"w": w}, state)
    assert abs(w.data[0] - 3.0) <= 0.01


def test_adam_missing_grad_names_parameter():
    with pytest.raises(ContractError, match="'decoder.x'"):
        adam_step({"decoder.x": Tensor(np.ones(2), requires_grad=True)}, AdamState())


def test_adam_lr_override_by_prefix():
    state = AdamState(learning_rate=1e-3, lr_overrides={"patch": 1e-6, "patch.proj.bias": 0.5})
    assert state.lr_for("patch.proj.weight") == 1e-6
    assert state.lr_for("patch.proj.bias") == 0.5
    assert state.lr_for("patchwork.x") == 1e-3
    assert state.lr_for("decoder.word_embed.table") == 1e-3


def test_adam_moments_match_parameter_shapes():
    params = {"a": Tensor(np.ones((2, 3)), requires_grad=True), "b": Tensor(np.ones(4), requires_grad=True)}
    for p in params.values():
        p.grad = np.ones(p.shape, dtype=np.float32)
    state = adam_step(params, AdamState())
    for name, p in params.items():
        assert state.first_moment[name].shape == p.shape == state.second_moment[name].shape


def test_clip_grad_norm():
    a = Tensor(np.zeros(2), requires_grad=True)
    b = Tensor(np.zeros(1), requires_grad=True)
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    total = math.sqrt(float((a.grad**2).sum() + (b.grad**2).sum()))
    assert total == pytest.approx(1.0, abs=1e-6)
    a.grad = np.array([0.3, 0.0])
    b.grad = np.array([0.4])
    clip_grad_norm([a, b], 1.0)
    np.testing.assert_allclose(a.grad, [0.3, 0.0])


def test_cast_returns_gradient_in_source_dtype():
    a = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    out = T.cast(a, np.float64) * 2.0
    assert out.data.dtype == np.float64
    T.backward(out.sum())
    assert a.grad.dtype == np.float32
    np.testing.assert_array_equal(a.grad, 2.0)
