import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import ortho_group

import oracles
from disengnn import tensor as T
from disengnn.model import disentanglement_loss, distance_correlation, pairwise_dcor


def dc(X, Y):
    with T.precision(np.float64):
        return float(distance_correlation(X, Y).data)


def test_matches_textbook_oracle_on_100_instances():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 9))
        X = rng.normal(size=(n, int(rng.integers(1, 5))))
        Y = rng.normal(size=(n, int(rng.integers(1, 5))))
        if rng.random() < 0.3:
            Y = np.tanh(X[:, :1]) + 0.1 * Y  # dependent pair
        worst = max(worst, abs(dc(X, Y) - oracles.dcor(X, Y)))
    assert worst < 1e-6


def test_self_correlation_is_one_for_50_matrices():
    rng = np.random.default_rng(1)
    for _ in range(50):
        X = rng.normal(size=(int(rng.integers(2, 10)), int(rng.integers(1, 6))))
        assert dc(X, X) == pytest.approx(1.0, abs=1e-6)


def test_invariant_to_translation_and_rotation():
    rng = np.random.default_rng(2)
    for _ in range(20):
        X, Y = rng.normal(size=(7, 4)), rng.normal(size=(7, 3))
        base = dc(X, Y)
        assert dc(X + rng.normal(size=4), Y) == pytest.approx(base, abs=1e-6)
        Q = ortho_group.rvs(4, random_state=rng)
        assert dc(X @ Q, Y) == pytest.approx(base, abs=1e-6)
        assert dc(3.0 * X, Y) == pytest.approx(base, abs=1e-6)


def test_constant_rows_give_zero():
    X = np.ones((5, 3))
    Y = np.random.default_rng(3).normal(size=(5, 2))
    assert dc(X, Y) == 0.0
    assert dc(Y, X) == 0.0


def test_two_rows_are_always_fully_correlated():
    rng = np.random.default_rng(4)
    assert dc(rng.normal(size=(2, 3)), rng.normal(size=(2, 3))) == pytest.approx(1.0, abs=1e-6)


@given(st.integers(0, 10_000))
def test_bounded_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 8))
    v = dc(rng.normal(size=(n, 2)), rng.normal(size=(n, 3)))
    assert -1e-9 <= v <= 1 + 1e-6


def test_independent_samples_shrink_toward_zero():
    rng = np.random.default_rng(5)
    small = np.mean([dc(rng.normal(size=(5, 2)), rng.normal(size=(5, 2))) for _ in range(20)])
    large = dc(rng.normal(size=(400, 2)), rng.normal(size=(400, 2)))
    assert large < 0.15 < small


def test_row_count_mismatch_and_too_few_rows():
    with pytest.raises(T.ShapeError):
        distance_correlation(np.ones((3, 2)), np.ones((4, 2)))
    with pytest.raises(ValueError):
        distance_correlation(np.ones((1, 2)), np.ones((1, 2)))


def test_masked_batch_equals_unpadded_sessions():
    rng = np.random.default_rng(6)
    B, K, M, dk = 4, 3, 6, 2
    n = np.array([6, 3, 1, 2])
    mask = np.arange(M)[None, :] < n[:, None]
    chunks = rng.normal(size=(B, K, M, dk))
    chunks[~np.broadcast_to(mask[:, None, :, None], chunks.shape)] = 99.0  # garbage in padding
    with T.precision(np.float64):
        got = pairwise_dcor(T.Tensor(chunks), mask).data
        loss = float(disentanglement_loss(T.Tensor(chunks), mask).data)
    per_session = []
    for b in range(B):
        total = 0.0
        for i in range(K):
            for j in range(K):
                want = oracles.dcor(chunks[b, i, :n[b]], chunks[b, j, :n[b]]) if n[b] >= 2 else 0.0
                assert got[b, i, j] == pytest.approx(want, abs=1e-6)
                if j > i:
                    total += want
        per_session.append(total)
    assert loss == pytest.approx(np.mean(per_session), abs=1e-6)


def test_single_factor_loss_is_exactly_zero():
    chunks = np.random.default_rng(7).normal(size=(2, 1, 4, 3))
    with T.precision(np.float64):
        assert disentanglement_loss(T.Tensor(chunks), np.ones((2, 4), dtype=bool)).data == 0.0
