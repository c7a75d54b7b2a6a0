import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dpal import tensor as T
from dpal.gradcheck import grad_check
from dpal.tensor import DimensionError, NumericError, Tensor, UsageError


def t64(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


# -- matmul ---------------------------------------------------------------------


def test_matmul_identity():
    out = T.matmul(t64(np.eye(2)), t64([[1, 2], [3, 4]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_annihilation():
    out = T.matmul(t64([[1, 0], [0, 0]]), t64([[0, 0], [0, 1]]))
    np.testing.assert_array_equal(out.data, np.zeros((2, 2)))


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
    ref = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(T.matmul(t64(a), t64(b)).data, ref, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))


# -- softmax ----------------------------------------------------------------------


def test_softmax_uniform_row():
    np.testing.assert_allclose(T.softmax_rows(t64([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], atol=1e-15)


def test_softmax_log_row():
    out = T.softmax_rows(t64([[math.log(1), math.log(2), math.log(3)]])).data
    np.testing.assert_allclose(out, [[1 / 6, 2 / 6, 3 / 6]], atol=1e-15)


def test_softmax_extreme_row_no_overflow():
    x = np.array([[1000.0, 0.0, -1000.0]])
    shifted = np.exp(x - x.max())
    ref = shifted / shifted.sum()
    out = T.softmax_rows(t64(x)).data
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out, ref, atol=1e-15)


def test_softmax_rows_rejects_empty():
    with pytest.raises(DimensionError):
        T.softmax_rows(t64(np.zeros((2, 0))))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(-1e100, 1e100, allow_nan=False)))
def test_softmax_rows_on_simplex(x):
    out = T.softmax_rows(t64(x)).data
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)


# -- layer norm / gelu ----------------------------------------------------------------


def test_layer_norm_constant_vector_is_zero():
    out = T.layer_norm(t64([3.0, 3.0, 3.0, 3.0]), t64(np.ones(4)), t64(np.zeros(4)))
    np.testing.assert_array_equal(out.data, np.zeros(4))


def test_layer_norm_already_normalised():
    out = T.layer_norm(t64([1.0, -1.0]), t64(np.ones(2)), t64(np.zeros(2)))
    np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-5)


def test_layer_norm_two_pass_reference():
    rng = np.random.default_rng(11)
    x, g, b = rng.normal(size=4), rng.normal(size=4), rng.normal(size=4)
    mu = sum(x) / 4
    var = sum((xi - mu) ** 2 for xi in x) / 4
    ref = (x - mu) / math.sqrt(var + 1e-5) * g + b
    np.testing.assert_allclose(T.layer_norm(t64(x), t64(g), t64(b)).data, ref, atol=1e-12)


def test_gelu_values():
    assert T.gelu(t64(0.0)).data == 0.0
    np.testing.assert_allclose(T.gelu(t64(30.0)).data, 30.0)
    ref = 1.0 * 0.5 * (1.0 + math.erf(1.0 / math.sqrt(2.0)))
    np.testing.assert_allclose(T.gelu(t64(1.0)).data, ref, rtol=1e-15)


# -- backward ------------------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = t64(np.arange(6.0).reshape(2, 3), grad=True)
    T.backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_half_square_norm_gives_x():
    x = t64([1.0, -2.0, 0.5], grad=True)
    T.backward(T.square(x).sum() * 0.5)
    np.testing.assert_allclose(x.grad, x.data)


def test_backward_accumulates_shared_subexpressions():
    x = t64([1.5, -0.3], grad=True)
    T.backward((x + x).sum())
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_backward_clears_tape():
    x = t64([1.0], grad=True)
    y = (x * 3.0).sum()
    assert len(T.get_tape()) > 0
    T.backward(y)
    assert len(T.get_tape()) == 0


def test_backward_rejects_non_scalar():
    x = t64([1.0, 2.0], grad=True)
    with pytest.raises(UsageError):
        T.backward(x * 2.0)
    T.reset_tape()


def test_no_grad_records_nothing():
    T.reset_tape()
    x = t64([1.0, 2.0], grad=True)
    with T.no_grad():
        _ = (x * 2.0).sum()
    assert len(T.get_tape()) == 0


@pytest.mark.filterwarnings("ignore:divide by zero")
def test_non_finite_is_hard_error():
    with pytest.raises(NumericError):
        T.log(t64([0.0]))
    T.reset_tape()


def test_tape_is_topological():
    T.reset_tape()
    x = t64([1.0, 2.0], grad=True)
    y = T.exp(x) * x
    z = y.sum()
    seen = {id(x)}
    for rec in T.get_tape().records:
        assert all(id(i) in seen for i in rec.inputs)
        seen.add(id(rec.out))
    T.backward(z)


def test_large_but_finite_inputs_stay_finite():
    big = t64([1e100, -1e100, 3.0])
    for out in (T.softmax(big), T.gelu(big), T.layer_norm(big, t64(np.ones(3)), t64(np.zeros(3)))):
        assert np.isfinite(out.data).all()


# -- gradient checks on every op --------------------------------------------------------

SEEDS = range(20)


def _ramp(*shape):
    return t64(np.arange(float(np.prod(shape))).reshape(shape))


def _rand(rng, *shape):
    return t64(rng.normal(size=shape))


OPS = {
    "add": lambda rng: ([_rand(rng, 3, 4), _rand(rng, 4)], lambda a, b: (T.add(a, b) * a).sum()),
    "sub": lambda rng: ([_rand(rng, 3, 4), _rand(rng, 3, 1)], lambda a, b: T.square(T.sub(a, b)).sum()),
    "mul": lambda rng: ([_rand(rng, 2, 3), _rand(rng, 2, 3)], lambda a, b: T.mul(a, b).sum()),
    "div": lambda rng: ([_rand(rng, 2, 3), t64(rng.uniform(0.5, 2.0, (2, 3)))],
                        lambda a, b: T.div(a, b).sum()),
    "exp": lambda rng: ([_rand(rng, 5)], lambda a: T.exp(a).sum()),
    "log": lambda rng: ([t64(rng.uniform(0.5, 3.0, 5))], lambda a: T.log(a).sum()),
    "sqrt": lambda rng: ([t64(rng.uniform(0.5, 3.0, 5))], lambda a: T.sqrt(a).sum()),
    "square": lambda rng: ([_rand(rng, 5)], lambda a: T.square(a).sum()),
    "clamp_min": lambda rng: ([t64(rng.uniform(0.2, 1.0, 5) * rng.choice([-1, 1], 5))],
                              lambda a: (T.clamp_min(a, 0.1) * a).sum()),
    "gelu": lambda rng: ([_rand(rng, 6)], lambda a: (T.gelu(a) * a).sum()),
    "sum_axis": lambda rng: ([_rand(rng, 3, 4)], lambda a: T.square(a.sum(axis=1)).sum()),
    "mean": lambda rng: ([_rand(rng, 3, 4)], lambda a: T.square(a.mean(axis=0)).sum()),
    "reshape_transpose": lambda rng: ([_rand(rng, 2, 6)],
                                      lambda a: (T.transpose(T.reshape(a, (3, 4))) * _ramp(4, 3)).sum()),
    "getitem": lambda rng: ([_rand(rng, 4, 3)], lambda a: T.square(a[[0, 2, 2]]).sum() + a[1:, 0].sum()),
    "concat_stack": lambda rng: ([_rand(rng, 2, 3), _rand(rng, 2, 3)],
                                 lambda a, b: T.square(T.concat([a, b], axis=0)).sum() + (T.stack([a, b]) * 2.0).sum()),
    "broadcast_to": lambda rng: ([_rand(rng, 1, 3)],
                                 lambda a: (T.broadcast_to(a, (4, 3)) * _ramp(4, 3)).sum()),
    "matmul": lambda rng: ([_rand(rng, 2, 3, 4), _rand(rng, 4, 5)], lambda a, b: T.square(T.matmul(a, b)).sum()),
    "softmax_rows_matmul": lambda rng: ([_rand(rng, 3, 3), _rand(rng, 3, 3)],
                                        lambda a, b: (T.softmax_rows(T.matmul(a, b)) * _ramp(3, 3)).sum()),
    "softmax_axis": lambda rng: ([_rand(rng, 2, 3, 4)],
                                 lambda a, w=_rand(rng, 2, 3, 4): (T.softmax(a, axis=1) * w).sum()),
    "layer_norm": lambda rng: ([_rand(rng, 3, 5), _rand(rng, 5), _rand(rng, 5)],
                               lambda x, g, b: (T.layer_norm(x, g, b) * t64(np.arange(15.0).reshape(3, 5))).sum()),
    "norm_rows": lambda rng: ([_rand(rng, 3, 4)], lambda a: T.norm_rows(a).sum()),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_grad_check_every_op(name):
    worst = 0.0
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        xs, f = OPS[name](rng)
        worst = max(worst, grad_check(lambda: f(*xs), xs, h=1e-5))
    assert worst < 1e-6, f"{name}: {worst}"


def test_grad_check_linear_function_is_exact():
    x = t64(np.random.default_rng(0).normal(size=(3, 4)))
    assert grad_check(lambda a: a.sum(), x) < 1e-9


def test_grad_check_softmax_matmul_3x3():
    rng = np.random.default_rng(1)
    a, b = _rand(rng, 3, 3), _rand(rng, 3, 3)
    w = t64(rng.normal(size=(3, 3)))
    assert grad_check(lambda: (T.softmax_rows(T.matmul(a, b)) * w).sum(), [a, b]) < 1e-6


def test_straight_through_onehot_forward_and_gradient():
    p = t64([[0.2, 0.5, 0.3]], grad=True)
    out = T.straight_through_onehot(p)
    np.testing.assert_array_equal(out.data, [[0.0, 1.0, 0.0]])
    T.backward((out * t64([[1.0, 2.0, 3.0]])).sum())
    np.testing.assert_array_equal(p.grad, [[1.0, 2.0, 3.0]])
