import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from disengnn import tensor as T
from disengnn.gradcheck import random_micro_batch
from disengnn.graph import similarity_matrices
from disengnn.model import (ModelConfig, ModelParams, chunk_embeddings, disentanglement_loss, flatten_chunks,
                            forward, ggnn_step, init_params, param_shapes, prediction_loss, residual_fuse,
                            score_items, session_embed, total_loss)
from disengnn.optim import make_rng

N_INSTANCES = 100
TOL = 1e-6


def random_params(rng, cfg, n_items, scale=0.5):
    """Larger weights than the 0.1 init so every nonlinearity leaves its linear regime."""
    p = init_params(cfg, n_items, rng, dtype=np.float64)
    for t in p.tensors.values():
        t.data = rng.normal(0.0, scale, size=t.shape)
    return p


def raw(p: ModelParams) -> dict:
    return {n: t.data for n, t in p.items()}


def random_config(rng, **kw):
    K = int(rng.choice([1, 2, 3]))
    dk = int(rng.integers(1, 4))
    base = dict(d=K * dk, K=K, T=1, L=1, lam=1.0, dropout=0.0,
                share_ggnn_across_factors=bool(rng.integers(2)),
                share_attention_across_factors=bool(rng.integers(2)))
    base.update(kw)
    return ModelConfig(**base)


def random_adjacency(rng, B, M):
    adj = rng.random((B, M, M)) < 0.4
    return adj


def test_ggnn_step_matches_oracle():
    rng = np.random.default_rng(10)
    worst = 0.0
    with T.precision(np.float64):
        for _ in range(N_INSTANCES):
            cfg = random_config(rng)
            P = random_params(rng, cfg, 4)
            B, M = int(rng.integers(1, 3)), int(rng.integers(1, 5))
            c = rng.normal(size=(B, cfg.K, M, cfg.dk))
            a_in, a_out = similarity_matrices(T.Tensor(c), random_adjacency(rng, B, M))
            got = ggnn_step(P, T.Tensor(c), a_in, a_out).data
            want = oracles.ggnn_step(raw(P), c, a_in.data, a_out.data)
            worst = max(worst, np.abs(got - want).max())
    assert worst < TOL


def test_residual_fuse_matches_oracle():
    rng = np.random.default_rng(11)
    worst = 0.0
    with T.precision(np.float64):
        for _ in range(N_INSTANCES):
            cfg = random_config(rng)
            P = random_params(rng, cfg, 3)
            n = int(rng.integers(1, 5))
            e_prev, e_ggnn = rng.normal(size=(n, cfg.d)), rng.normal(size=(n, cfg.d))
            got = residual_fuse(P, e_prev, e_ggnn).data
            want = np.array([oracles.residual_fuse(raw(P), a, b) for a, b in zip(e_prev, e_ggnn)])
            worst = max(worst, np.abs(got - want).max())
            single = residual_fuse(P, e_prev[0], e_ggnn[0]).data
            worst = max(worst, np.abs(single - want[0]).max())
    assert worst < TOL


def test_residual_output_lies_between_inputs():
    rng = np.random.default_rng(12)
    cfg = ModelConfig(d=4, K=2, T=1, L=1)
    with T.precision(np.float64):
        P = random_params(rng, cfg, 3)
        a, b = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
        out = residual_fuse(P, a, b).data
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)
    with pytest.raises(T.ShapeError):
        residual_fuse(P, a, b[:, :2])


def test_session_embed_matches_oracle():
    rng = np.random.default_rng(13)
    worst = 0.0
    with T.precision(np.float64):
        for _ in range(N_INSTANCES):
            cfg = random_config(rng)
            P = random_params(rng, cfg, 3)
            B, Pn = int(rng.integers(1, 4)), int(rng.integers(1, 6))
            lengths = rng.integers(1, Pn + 1, size=B)
            mask = np.arange(Pn)[None, :] < lengths[:, None]
            pos = rng.normal(size=(B, cfg.K, Pn, cfg.dk))
            emb = session_embed(P, T.Tensor(pos), mask)
            for b in range(B):
                s_l, s_g, s_h = oracles.session_embed(raw(P), pos[b], int(lengths[b]))
                for got, want in ((emb.s_l, s_l), (emb.s_g, s_g), (emb.s_h, s_h)):
                    worst = max(worst, np.abs(got.data[b] - want).max())
    assert worst < TOL


def test_score_items_matches_oracle():
    rng = np.random.default_rng(14)
    worst = 0.0
    with T.precision(np.float64):
        for _ in range(N_INSTANCES):
            B, N, d = int(rng.integers(1, 4)), int(rng.integers(1, 9)), int(rng.integers(1, 7))
            s_h, cand = rng.normal(size=(B, d)), rng.normal(size=(N, d))
            got = score_items(T.Tensor(s_h), T.Tensor(cand)).data
            want = np.array([oracles.score(s, cand) for s in s_h])
            worst = max(worst, np.abs(got - want).max())
    assert worst < TOL


def test_chunks_match_oracle_and_factorise_the_dot_product():
    rng = np.random.default_rng(15)
    cfg = ModelConfig(d=6, K=3, T=1, L=1)
    with T.precision(np.float64):
        P = random_params(rng, cfg, 5)
        got = chunk_embeddings(P, P["embedding"]).data
        flat = flatten_chunks(T.Tensor(got)).data
    assert np.abs(got - oracles.chunks(raw(P), P["embedding"].data)).max() < TOL
    assert np.allclose(np.linalg.norm(got, axis=-1), 1.0)
    s = rng.normal(size=6)
    per_factor = sum(s[k * 2:(k + 1) * 2] @ got[k, 0] for k in range(3))
    assert per_factor == pytest.approx(s @ flat[0])


@pytest.mark.parametrize("flags", [
    dict(K=1, use_factor_similarity=False, use_residual_attention=False),
    dict(K=2, use_factor_similarity=True, use_residual_attention=True),
    dict(K=3, use_factor_similarity=True, use_residual_attention=False, T=2, L=2),
])
def test_forward_matches_node_by_node_oracle(flags):
    cfg = ModelConfig(**{**dict(d=6, T=1, L=1, lam=1.0, dropout=0.0), **flags})
    rng = np.random.default_rng(16)
    seqs = [[0, 1, 2, 1], [3], [4, 4, 0, 2, 5, 1]]
    with T.precision(np.float64):
        P = random_params(rng, cfg, 7)
        got = forward(cfg, P, seqs).logits.data
    want = np.array([oracles.forward_logits(raw(P), cfg, s) for s in seqs])
    assert np.abs(got - want).max() < TOL


def test_forward_batch_rows_do_not_interact():
    cfg = ModelConfig(d=6, K=2, T=2, L=2, dropout=0.0)
    rng = np.random.default_rng(17)
    seqs = [[0, 1, 2, 1], [3], [4, 4, 0, 2, 5, 1]]
    with T.precision(np.float64):
        P = random_params(rng, cfg, 7)
        batched = forward(cfg, P, seqs).logits.data
        for i, s in enumerate(seqs):
            assert np.allclose(forward(cfg, P, [s]).logits.data[0], batched[i], atol=1e-12)


def test_padding_values_never_reach_outputs():
    cfg = ModelConfig(d=8, K=2, T=2, L=2, lam=5.0, dropout=0.0)
    seqs, labels = [[0, 1, 2, 0, 3], [4], [1, 5]], [2, 3, 0]
    with T.precision(np.float64):
        P = init_params(cfg, 7, make_rng(0), dtype=np.float64)
        a = forward(cfg, P, seqs, labels, pad_fill=0.0)
        b = forward(cfg, P, seqs, labels, pad_fill=1e3)
    assert np.array_equal(a.logits.data, b.logits.data)
    assert np.array_equal(a.loss.data, b.loss.data)


def test_eval_forward_is_deterministic():
    cfg = ModelConfig(d=8, K=2, T=1, L=2, dropout=0.5)
    P = init_params(cfg, 7, make_rng(0))
    seqs = [[0, 1], [2, 3, 2]]
    assert np.array_equal(forward(cfg, P, seqs).logits.data, forward(cfg, P, seqs).logits.data)


def test_training_dropout_uses_its_rng():
    cfg = ModelConfig(d=8, K=2, T=1, L=2, dropout=0.5)
    P = init_params(cfg, 7, make_rng(0))
    seqs = [[0, 1], [2, 3, 2]]
    a = forward(cfg, P, seqs, training=True, rng=make_rng(0, "dropout")).logits.data
    b = forward(cfg, P, seqs, training=True, rng=make_rng(0, "dropout")).logits.data
    c = forward(cfg, P, seqs, training=False).logits.data
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    with pytest.raises(ValueError):
        forward(cfg, P, seqs, training=True)


@pytest.mark.parametrize("shared", [True, False])
def test_no_dead_parameters(shared):
    cfg = ModelConfig(d=8, K=2, T=2, L=2, lam=5.0, dropout=0.0, share_ggnn_across_factors=shared,
                      share_attention_across_factors=shared)
    seqs, labels = random_micro_batch(make_rng(3, "gradcheck"), 7, n_sessions=5)
    with T.precision(np.float64):
        P = init_params(cfg, 7, make_rng(1), dtype=np.float64)
        forward(cfg, P, seqs, labels).loss.backward()
    dead = [n for n, t in P.items() if not np.any(t.grad != 0)]
    assert not dead
    assert set(P.names()) == set(param_shapes(cfg, 7))


def test_prediction_loss_matches_two_term_cross_entropy():
    rng = np.random.default_rng(18)
    with T.precision(np.float64):
        for _ in range(20):
            z = rng.normal(size=(3, 6))
            yhat = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
            t = rng.integers(0, 6, size=3)
            assert prediction_loss(T.Tensor(yhat), t).data == pytest.approx(oracles.two_term_ce(yhat, t))


def test_total_loss_examples():
    assert total_loss(1.0, 0.2, 5.0) == pytest.approx(2.0)
    rng = np.random.default_rng(19)
    lc, ld = rng.random(2)
    assert total_loss(lc, ld, 15.0) == pytest.approx(lc + 15.0 * ld)
    assert total_loss(lc, ld, 0.0) == lc


def test_lambda_scales_only_the_regulariser():
    cfg = ModelConfig(d=8, K=2, T=1, L=1, lam=0.0, dropout=0.0)
    seqs, labels = [[0, 1, 2], [3, 4]], [1, 2]
    with T.precision(np.float64):
        P = init_params(cfg, 6, make_rng(0), dtype=np.float64)
        a = forward(cfg, P, seqs, labels)
        b = forward(ModelConfig(d=8, K=2, T=1, L=1, lam=7.0, dropout=0.0), P, seqs, labels)
    assert a.loss.data == pytest.approx(a.loss_c.data)
    assert b.loss.data == pytest.approx(b.loss_c.data + 7.0 * b.loss_dec.data)
    assert a.loss_dec.data == pytest.approx(b.loss_dec.data) and a.loss_dec.data > 0


@given(st.floats(-50, 50, allow_nan=False))
def test_argmax_invariant_to_logit_shift(c):
    z = np.array([[0.3, -1.2, 2.5, 0.0]])
    with T.precision(np.float64):
        a = T.softmax(T.Tensor(z), axis=-1).data
        b = T.softmax(T.Tensor(z + c), axis=-1).data
    assert a.argmax() == b.argmax()
    assert np.allclose(a, b)


def test_invalid_config_is_rejected():
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(d=10, K=3).validate()
    with pytest.raises(ValueError):
        ModelConfig(T=0).validate()


def test_disentanglement_loss_counts_factor_pairs():
    rng = np.random.default_rng(20)
    X = rng.normal(size=(5, 2))
    with T.precision(np.float64):
        assert disentanglement_loss(np.stack([X, X])).data == pytest.approx(1.0)
        three = rng.normal(size=(3, 5, 2))
        want = sum(oracles.dcor(three[i], three[j]) for i in range(3) for j in range(i + 1, 3))
        assert disentanglement_loss(three).data == pytest.approx(want, abs=1e-6)
        assert disentanglement_loss(rng.normal(size=(1, 5, 2))).data == 0.0
