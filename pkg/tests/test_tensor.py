import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from septr import tensor as T
from septr.tensor import Tensor


def _loss_through(fn, arrays, weights):
    """Scalar loss sum(fn(*inputs) * weights) so every output entry matters."""
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*ts)
    return T.sum_axis(out * Tensor(weights)), ts


def _check_grads(fn, arrays, seed=0):
    rng = np.random.default_rng(seed)
    probe = fn(*[Tensor(a) for a in arrays])
    weights = rng.normal(size=probe.shape)
    loss, ts = _loss_through(fn, arrays, weights)
    T.backward(loss)
    worst = 0.0
    for i, a in enumerate(arrays):
        def f():
            return float((fn(*[Tensor(x) for x in arrays]).data * weights).sum())

        num = T.numerical_grad(f, arrays[i])
        worst = max(worst, T.relative_error(ts[i].grad, num))
    return worst


# ---------------------------------------------------------------- matmul


def naive_matmul(a, b):
    m, p = a.shape
    q = b.shape[1]
    out = np.zeros((m, q))
    for i in range(m):
        for j in range(q):
            s = 0.0
            for r in range(p):
                s += a[i, r] * b[r, j]
            out[i, j] = s
    return out


def test_matmul_identity_and_zero():
    m = np.random.default_rng(1).normal(size=(3, 3))
    assert np.array_equal((Tensor(np.eye(3)) @ Tensor(m)).data, m)
    assert np.array_equal((Tensor(np.zeros((3, 3))) @ Tensor(m)).data, np.zeros((3, 3)))


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    assert np.abs((Tensor(a) @ Tensor(b)).data - naive_matmul(a, b)).max() <= 1e-12


def test_matmul_shape_error_names_shapes():
    with pytest.raises(T.DimensionError, match=r"\(3, 4\).*\(3, 2\)"):
        Tensor(np.ones((3, 4))) @ Tensor(np.ones((3, 2)))


def test_matmul_associativity():
    rng = np.random.default_rng(3)
    for _ in range(10):
        a, b, c = (Tensor(rng.normal(size=(3, 3))) for _ in range(3))
        left = ((a @ b) @ c).data
        right = (a @ (b @ c)).data
        assert np.abs(left - right).max() <= 1e-10


# ---------------------------------------------------------------- softmax


def test_softmax_uniform_and_analytic():
    y = T.softmax_rows(Tensor(np.full((2, 5), 3.7))).data
    assert np.allclose(y, 0.2, atol=1e-15)
    y = T.softmax_rows(Tensor([[0.0, math.log(2.0)]])).data
    assert np.abs(y - [[1 / 3, 2 / 3]]).max() <= 1e-12


def test_softmax_large_logits_shifted_oracle():
    y = T.softmax_rows(Tensor([[1000.0, 1000.5]])).data
    e = np.exp([0.0, 0.5])
    assert np.abs(y - e / e.sum()).max() <= 1e-12


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-50, 50), min_size=1, max_size=8),
    st.floats(-100, 100),
)
def test_softmax_rows_sum_to_one_and_shift_invariant(row, c):
    x = np.array([row])
    y = T.softmax_rows(Tensor(x)).data
    assert (y >= 0).all()
    assert abs(y.sum() - 1.0) <= 1e-12
    y2 = T.softmax_rows(Tensor(x + c)).data
    assert np.abs(y - y2).max() <= 1e-12


# ---------------------------------------------------------------- layer norm


def test_layer_norm_constant_token_and_affine_collapse():
    d = 6
    out = T.layer_norm(Tensor(np.full((2, d), 4.2)), Tensor(np.ones(d)), Tensor(np.zeros(d))).data
    assert np.array_equal(out, np.zeros((2, d)))
    b = np.arange(d, dtype=float)
    x = np.random.default_rng(0).normal(size=(3, d))
    out = T.layer_norm(Tensor(x), Tensor(np.zeros(d)), Tensor(b)).data
    assert np.array_equal(out, np.broadcast_to(b, (3, d)))


def test_layer_norm_two_pass_oracle():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(5, 7))
    eps = 1e-5
    expected = np.empty_like(x)
    for i, row in enumerate(x):
        mean = sum(row) / len(row)
        var = sum((v - mean) ** 2 for v in row) / len(row)
        expected[i] = [(v - mean) / math.sqrt(var + eps) for v in row]
    out = T.layer_norm(Tensor(x), Tensor(np.ones(7)), Tensor(np.zeros(7)), eps).data
    assert np.abs(out - expected).max() <= 1e-12


def test_layer_norm_standardizes_high_variance_tokens():
    x = np.random.default_rng(5).normal(size=(4, 16)) * 1e3
    out = T.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    assert np.abs(out.mean(axis=-1)).max() <= 1e-10
    assert np.abs(out.var(axis=-1) - 1.0).max() <= 1e-10


# ---------------------------------------------------------------- gelu


def test_gelu_fixed_points():
    assert T.gelu(Tensor([0.0])).data[0] == 0.0
    assert abs(T.gelu(Tensor([10.0])).data[0] - 10.0) < 1e-6


def test_gelu_quadrature_oracle():
    phi, _ = integrate.quad(lambda t: math.exp(-t * t / 2) / math.sqrt(2 * math.pi), -np.inf, 1.0, epsabs=1e-13)
    assert abs(T.gelu(Tensor([1.0])).data[0] - 1.0 * phi) <= 1e-9


def test_gelu_monotone_on_grid():
    y = T.gelu(Tensor(np.linspace(-0.75, 8, 400))).data
    assert (np.diff(y) >= 0).all()


# ---------------------------------------------------------------- reductions


def test_mean_axis_cases():
    s = np.arange(5.0)
    stacked = np.stack([s, s, s])
    assert np.array_equal(T.mean_axis(Tensor(stacked), 0).data, s)
    assert T.mean_axis(Tensor([1.0, 2.0, 3.0]), 0).item() == 2.0
    x = np.random.default_rng(6).normal(size=(4, 5))
    oracle = [sum(x[r, c] for r in range(4)) / 4 for c in range(5)]
    assert np.abs(T.mean_axis(Tensor(x), 0).data - oracle).max() <= 1e-12
    with pytest.raises(IndexError):
        T.mean_axis(Tensor(x), 2)


# ---------------------------------------------------------------- cross entropy


def test_cross_entropy_uniform_and_saturated():
    c = 7
    loss = T.cross_entropy(Tensor(np.zeros((3, c))), np.array([0, 4, 6])).item()
    assert abs(loss - math.log(c)) <= 1e-14
    logits = np.array([[100.0, 0.0, 0.0]])
    assert T.cross_entropy(Tensor(logits), np.array([0])).item() < 1e-10


def test_cross_entropy_log_sum_exp_oracle():
    rng = np.random.default_rng(7)
    z = rng.normal(size=(2, 3))
    y = np.array([2, 0])
    oracle = 0.0
    for row, label in zip(z, y):
        oracle += math.log(sum(math.exp(v) for v in row)) - row[label]
    oracle /= 2
    assert abs(T.cross_entropy(Tensor(z), y).item() - oracle) <= 1e-12


def test_cross_entropy_label_range():
    with pytest.raises(IndexError):
        T.cross_entropy(Tensor(np.zeros((1, 3))), np.array([3]))


def test_cross_entropy_soft_labels_match_hard():
    z = np.random.default_rng(8).normal(size=(2, 4))
    hard = T.cross_entropy(Tensor(z), np.array([1, 3])).item()
    soft = T.cross_entropy(Tensor(z), np.eye(4)[[1, 3]]).item()
    assert abs(hard - soft) <= 1e-14


# ---------------------------------------------------------------- backward contract


def test_backward_linear_and_product():
    x = Tensor(np.random.default_rng(9).normal(size=(3, 2)), requires_grad=True)
    T.backward(T.sum_axis(x))
    assert np.array_equal(x.grad, np.ones((3, 2)))

    a = Tensor(2.0, requires_grad=True)
    b = Tensor(3.0, requires_grad=True)
    T.backward(a * b)
    assert a.grad == 3.0 and b.grad == 2.0


def test_backward_rejects_non_scalar_and_second_replay():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(T.GradientError):
        T.backward(x * 2.0)
    loss = T.sum_axis(x * x)
    T.backward(loss)
    with pytest.raises(T.GradientError):
        T.backward(loss)


def test_grads_accumulate_until_zeroed():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    for _ in range(2):
        T.backward(T.sum_axis(x * x))
    assert np.array_equal(x.grad, 2 * 2 * x.data)
    x.zero_grad()
    T.backward(T.sum_axis(x * x))
    assert np.array_equal(x.grad, 2 * x.data)


def test_shared_node_visited_once():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = x * x
    z = T.sum_axis(y + y)
    T.backward(z)
    assert x.grad[0] == 12.0


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_non_finite_is_an_error():
    with pytest.raises(T.NonFiniteError):
        Tensor([1.0, np.nan])
    big = Tensor(np.array([1e200]), requires_grad=True)
    with pytest.raises(T.NonFiniteError):
        big * big


def test_no_grad_skips_recording():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad


# ---------------------------------------------------------------- finite-difference sweep


RNG = np.random.default_rng(123)
GRAD_CASES = {
    "add_broadcast": (lambda a, b: a + b, [RNG.normal(size=(2, 3, 4)), RNG.normal(size=(3, 1))]),
    "sub": (lambda a, b: a - b, [RNG.normal(size=(2, 3)), RNG.normal(size=(2, 3))]),
    "mul_broadcast": (lambda a, b: a * b, [RNG.normal(size=(2, 3)), RNG.normal(size=(3,))]),
    "div": (lambda a, b: a / b, [RNG.normal(size=(2, 3)), RNG.uniform(1, 2, size=(2, 3))]),
    "scale": (lambda a: T.scale(a, -1.7), [RNG.normal(size=(4,))]),
    "matmul_batched": (lambda a, b: a @ b, [RNG.normal(size=(2, 3, 4)), RNG.normal(size=(4, 2))]),
    "transpose": (lambda a: T.transpose(a), [RNG.normal(size=(2, 3, 4))]),
    "permute": (lambda a: T.permute(a, (2, 0, 1)), [RNG.normal(size=(2, 3, 4))]),
    "reshape": (lambda a: T.reshape(a, (6, 2)), [RNG.normal(size=(3, 4))]),
    "broadcast_to": (lambda a: T.broadcast_to(a, (3, 2, 4)), [RNG.normal(size=(2, 1))]),
    "concat": (lambda a, b: T.concat([a, b], axis=1), [RNG.normal(size=(2, 1, 3)), RNG.normal(size=(2, 2, 3))]),
    "slice": (lambda a: a[:, 1:], [RNG.normal(size=(3, 4))]),
    "sum_axis": (lambda a: T.sum_axis(a, 1), [RNG.normal(size=(3, 4))]),
    "mean_axis": (lambda a: T.mean_axis(a, 0), [RNG.normal(size=(3, 4))]),
    "softmax": (lambda a: T.softmax_rows(a), [RNG.normal(size=(2, 3, 3))]),
    "layer_norm": (lambda x, g, b: T.layer_norm(x, g, b), [RNG.normal(size=(3, 5)), RNG.normal(size=5), RNG.normal(size=5)]),
    "gelu": (lambda a: T.gelu(a), [RNG.normal(size=(3, 4)) * 2]),
    "cross_entropy": (lambda z: T.cross_entropy(z, np.array([0, 2, 1])), [RNG.normal(size=(3, 4))]),
    "cross_entropy_soft": (
        lambda z: T.cross_entropy(z, np.array([[0.3, 0.7, 0.0], [0.0, 0.0, 1.0]])),
        [RNG.normal(size=(2, 3))],
    ),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_primitive_gradients_match_finite_differences(name):
    fn, arrays = GRAD_CASES[name]
    arrays = [a.copy() for a in arrays]
    assert _check_grads(fn, arrays) <= 1e-5
