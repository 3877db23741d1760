import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from causalpose import numerics as nm
from causalpose.gradcheck import OPS, run

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def vec(n):
    return hnp.arrays(np.float64, n, elements=finite)


def test_add_values():
    assert np.array_equal(nm.add([1.0, 2.0], [3.0, 4.0]).data, [4.0, 6.0])


def test_identity_matmul():
    A = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(nm.matmul(np.eye(3), A).data, A)


@pytest.mark.parametrize("logits, expected", [
    ([0.0, 0.0, 0.0], [1 / 3, 1 / 3, 1 / 3]),
    ([0.0, 0.0], [0.5, 0.5]),
    ([0.0, math.log(3.0)], [0.25, 0.75]),
])
def test_softmax_values(logits, expected):
    assert np.allclose(nm.softmax(logits).data, expected, atol=1e-15)


def test_softmax_shift_of_constant_vector():
    base = nm.softmax([10.0, 10.0, 10.0]).data
    assert np.allclose(nm.softmax([10.0 + 7.5, 17.5, 17.5]).data, base, atol=1e-15)


@given(vec(6), st.floats(-50, 50))
def test_softmax_normalised_and_shift_invariant(z, c):
    p = nm.softmax(z).data
    assert np.all(p >= 0)
    assert abs(p.sum() - 1) < 1e-12
    assert np.allclose(nm.softmax(z + c).data, p, atol=1e-12)


def test_kl_identical_is_zero():
    assert nm.kl_div([0.3, 0.7], [0.3, 0.7]).item() == 0.0


def test_kl_one_hot_vs_uniform():
    assert nm.kl_div([1.0, 0.0], [0.5, 0.5]).item() == pytest.approx(math.log(2), abs=1e-15)


def test_kl_length_mismatch():
    with pytest.raises(nm.ShapeError):
        nm.kl_div([0.5, 0.5], [1 / 3, 1 / 3, 1 / 3])


def test_kl_matches_scalar_loop():
    rng = np.random.default_rng(3)
    q, p = rng.dirichlet(np.ones(8)), rng.dirichlet(np.ones(8))
    total = 0.0
    for qi, pi in zip(q, p):
        total += qi * math.log(qi / pi)
    assert nm.kl_div(q, p).item() == pytest.approx(total, rel=1e-13)


def test_kl_clamps_zero_prediction():
    out = nm.kl_div([0.5, 0.5], [1.0, 0.0]).item()
    assert out == pytest.approx(0.5 * math.log(0.5) + 0.5 * (math.log(0.5) - math.log(nm.KL_EPS)))


@given(st.integers(2, 9).flatmap(lambda n: st.tuples(
    hnp.arrays(np.float64, n, elements=st.floats(0, 1)), hnp.arrays(np.float64, n, elements=st.floats(1e-3, 1)))))
def test_kl_nonnegative(pair):
    q, p = pair
    if q.sum() == 0:
        q = q + 1.0
    q, p = q / q.sum(), p / p.sum()
    assert nm.kl_div(q, p).item() >= -1e-15


def test_square_derivative():
    x = nm.Tensor(3.0, requires_grad=True)
    nm.backward(x * x)
    assert x.grad == 6.0


def test_stop_gradient_blocks():
    x = nm.Tensor(2.0, requires_grad=True)
    y = nm.Tensor(5.0, requires_grad=True)
    nm.backward(nm.stop_gradient(x) * y)
    assert x.grad is None
    assert y.grad == 2.0


@given(vec(4), vec(4))
def test_stop_gradient_only_paths_get_nothing(a, b):
    x = nm.Tensor(a, requires_grad=True)
    w = nm.Tensor(b, requires_grad=True)
    h = nm.sigmoid(x * w)
    loss = nm.sum_(nm.stop_gradient(h) * w) + nm.sum_(nm.relu(nm.stop_gradient(x)))
    nm.backward(loss)
    assert x.grad is None
    assert np.array_equal(w.grad, h.data)


def test_backward_rejects_vector_loss():
    with pytest.raises(nm.ShapeError):
        nm.backward(nm.Tensor([1.0, 2.0], requires_grad=True) * 2.0)


def test_shape_error_names_op():
    with pytest.raises(nm.ShapeError) as info:
        nm.matmul(np.ones((2, 3)), np.ones((4, 2)))
    assert info.value.op == "matmul"
    assert info.value.shapes == ((2, 3), (4, 2))


def test_kl_softmax_gradient_vs_central_differences():
    rng = np.random.default_rng(0)
    q = rng.dirichlet(np.ones(5))
    z0 = rng.normal(size=5)
    err = nm.grad_check(lambda P: nm.kl_div(q, nm.softmax(P["z"])), {"z": z0}, step=1e-5)
    assert err < 1e-6


def test_linear_map_gradcheck_exact():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 3))
    w = rng.normal(size=(4, 2))
    err = nm.grad_check(lambda P: nm.sum_(nm.mul(nm.matmul(x, P["W"]), w)), {"W": rng.normal(size=(3, 2))})
    assert err < 1e-10


def test_sigmoid_chain_gradcheck():
    rng = np.random.default_rng(2)
    err = nm.grad_check(lambda P: nm.sum_(nm.sigmoid(nm.sigmoid(nm.scale(P["a"], 1.7)))), {"a": rng.normal(size=4)})
    assert err < 1e-6


def test_gradcheck_step_bounds():
    with pytest.raises(ValueError):
        nm.grad_check(lambda P: nm.sum_(P["a"]), {"a": np.ones(2)}, step=0.1)
    with pytest.raises(ValueError):
        nm.grad_check(lambda P: nm.sum_(P["a"]), {"a": np.ones(2)}, step=0.0)


def test_gradcheck_non_finite():
    with pytest.raises(nm.NonFiniteError):
        nm.grad_check(lambda P: nm.sum_(nm.scale(P["a"], np.inf)), {"a": np.ones(2)})


@pytest.mark.parametrize("op", [o for o in OPS if o != "model"])
@settings(max_examples=100)
@given(seed=st.integers(0, 2**32 - 1))
def test_each_op_matches_finite_differences(op, seed):
    assert run([op], seed=seed)[op] < 1e-4


@given(hnp.arrays(np.float64, (3, 5), elements=finite), st.integers(0, 1))
def test_max_along_matches_numpy(a, axis):
    x = nm.Tensor(a, requires_grad=True)
    out = nm.max_along(x, axis)
    assert np.array_equal(out.data, a.max(axis=axis))
    nm.backward(nm.sum_(out))
    # exactly one unit of gradient per reduced slice, at the first argmax
    assert x.grad.sum() == a.shape[1 - axis]
    first = np.argmax(a, axis=axis)
    picked = np.take_along_axis(x.grad, np.expand_dims(first, axis), axis)
    assert np.all(picked == 1.0)


def test_take_repeated_indices_accumulate():
    a = nm.Tensor(np.arange(4.0), requires_grad=True)
    nm.backward(nm.sum_(nm.take(a, [0, 0, 3], axis=0)))
    assert np.array_equal(a.grad, [2.0, 0.0, 0.0, 1.0])


@given(hnp.arrays(np.float64, (2, 3), elements=finite), hnp.arrays(np.float64, (2, 3), elements=finite))
def test_forward_backward_deterministic(a, b):
    def once():
        x, y = nm.Tensor(a, requires_grad=True), nm.Tensor(b, requires_grad=True)
        out = nm.sum_(nm.softmax(nm.mul(x, y), axis=1) * y)
        nm.backward(out)
        return out.data.tobytes(), x.grad.tobytes(), y.grad.tobytes()

    assert once() == once()


def test_topological_order_parents_first():
    x = nm.Tensor(1.0, requires_grad=True)
    a = x * 2.0
    b = a + x
    c = b * a
    order = nm.topological_order(c)
    pos = {n.id: i for i, n in enumerate(order)}
    for node in order:
        for p in node.parents:
            assert pos[p.id] < pos[node.id]


@given(hnp.arrays(np.float64, (2, 4), elements=finite))
def test_forward_values_stay_finite(a):
    out = nm.softmax(nm.sigmoid(nm.relu(a)) @ np.ones((4, 3)), axis=-1)
    assert np.all(np.isfinite(out.data))
