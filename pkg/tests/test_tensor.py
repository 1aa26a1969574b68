import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from disengnn import tensor as T
from disengnn.gradcheck import check_primitives, grad_check
from disengnn.tensor import ShapeError, Tensor

finite = st.floats(-30, 30, allow_nan=False, allow_infinity=False)


def mat(rows=st.integers(1, 5), cols=st.integers(1, 5)):
    return st.tuples(rows, cols).flatmap(lambda s: arrays(np.float64, s, elements=finite))


def np_softmax(x, axis=-1):
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


@given(mat())
def test_softmax_matches_numpy_and_sums_to_one(x):
    with T.precision(np.float64):
        out = T.softmax(Tensor(x), axis=-1).data
    assert np.allclose(out, np_softmax(x), atol=1e-12)
    assert np.allclose(out.sum(axis=-1), 1.0)


@given(mat())
def test_sigmoid_and_tanh_match_reference(x):
    with T.precision(np.float64):
        s = T.sigmoid(Tensor(x)).data
        t = T.tanh(Tensor(x)).data
    assert np.allclose(s, 1.0 / (1.0 + np.exp(-x)), atol=1e-12)
    assert np.allclose(t, np.tanh(x), atol=1e-12)
    assert np.all((s >= 0) & (s <= 1))


def test_sigmoid_is_stable_at_extremes():
    with T.precision(np.float64):
        s = T.sigmoid(Tensor(np.array([-1000.0, 1000.0]))).data
    assert np.all(np.isfinite(s))
    assert s[0] == pytest.approx(0.0) and s[1] == pytest.approx(1.0)


@given(mat())
def test_l2_normalize_gives_unit_rows(x):
    with T.precision(np.float64):
        out = T.l2_normalize(Tensor(x), axis=-1).data
    norms = np.linalg.norm(x, axis=-1)
    big = norms > 1e-6
    assert np.allclose(np.linalg.norm(out[big], axis=-1), 1.0)


def test_gradient_accumulates_over_reuse():
    x = T.parameter(np.array([1.0, -2.0, 3.0]), dtype=np.float64)
    T.tsum(T.add(x, x)).backward()
    assert np.array_equal(x.grad, [2.0, 2.0, 2.0])


def test_shared_subexpression_gradient():
    x = T.parameter(np.array([0.5, 1.5]), dtype=np.float64)
    y = T.mul(x, x)
    T.tsum(T.add(y, y)).backward()
    assert np.allclose(x.grad, 4 * x.data)


def test_matmul_gradient_matches_finite_differences(rng):
    w = rng.normal(size=(2, 3, 5))
    with T.precision(np.float64):
        params = {"a": T.parameter(rng.normal(size=(2, 3, 4)), dtype=np.float64),
                  "b": T.parameter(rng.normal(size=(4, 5)), dtype=np.float64)}
        rep = grad_check(lambda p: T.tsum(T.mul(T.matmul(p["a"], p["b"]), w)), params, h=1e-6,
                         tolerance=1e-7)
    assert rep.passed, rep.worst


def test_matmul_rejects_mismatched_shapes():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_broadcast_gradient_is_reduced_to_parent_shape():
    a = T.parameter(np.ones((3, 4)), dtype=np.float64)
    b = T.parameter(np.ones(4), dtype=np.float64)
    T.tsum(T.mul(a, b)).backward()
    assert b.grad.shape == (4,)
    assert np.array_equal(b.grad, [3.0] * 4)


def test_getitem_scatters_repeated_indices():
    x = T.parameter(np.zeros((4, 2)), dtype=np.float64)
    T.tsum(x[np.array([0, 2, 2])]).backward()
    assert np.array_equal(x.grad[:, 0], [1.0, 0.0, 2.0, 0.0])


def test_clamp_min_blocks_gradient_below_floor():
    x = T.parameter(np.array([-1.0, 0.5]), dtype=np.float64)
    T.tsum(T.clamp_min(x, 0.0)).backward()
    assert np.array_equal(x.grad, [0.0, 1.0])


def test_pairwise_distance_is_exact_and_finite_at_zero():
    x = T.parameter(np.array([[0.0, 0.0], [3.0, 4.0], [0.0, 0.0]]), dtype=np.float64)
    d = T.pairwise_distance(x)
    assert np.allclose(d.data, [[0, 5, 0], [5, 0, 5], [0, 5, 0]])
    T.tsum(d).backward()
    assert np.all(np.isfinite(x.grad))


def test_no_grad_records_nothing():
    x = T.parameter(np.ones(3), dtype=np.float64)
    with T.no_grad():
        y = T.mul(x, 2.0)
    assert not y.requires_grad


def test_dropout_is_identity_in_eval_and_unbiased_in_training(rng):
    x = Tensor(np.ones((200, 50)))
    assert np.array_equal(T.dropout(x, 0.5, rng, training=False).data, x.data)
    y = T.dropout(x, 0.5, rng, training=True).data
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert abs(y.mean() - 1.0) < 0.05


def test_every_primitive_passes_isolated_gradient_check():
    errs = check_primitives(seed=0)
    assert set(errs) == set(T.PRIMITIVES)
    bad = {k: v for k, v in errs.items() if not v < 1e-6}
    assert not bad


def test_corrupted_backward_is_detected_by_name():
    with T.corrupt_backward("sigmoid", 1.05):
        errs = check_primitives(seed=0)
    assert errs["sigmoid"] > 1e-3
    assert all(v < 1e-6 for k, v in errs.items() if k != "sigmoid")
