"""Disen-GNN: disentangled factor chunks, factor-wise gated graph propagation,
residual attention, distance-correlation regularisation, factor-level session
attention and dot-product scoring.

Node-level tensors use the layout ``(B, K, M, dk)``: batch, factor, node slot,
chunk width.  Weights follow ``y = x @ W.T`` with ``W`` shaped ``(out, in)``;
per-factor variants carry an extra leading ``K`` axis and broadcast through the
same ``matmul``.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .graph import BatchGraph, batch_graphs, similarity_matrices
from .optim import gaussian_init
from .tensor import EPS, ShapeError, Tensor

LOG_FLOOR = 1e-12


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class ModelConfig:
    d: int = 100
    K: int = 5
    T: int = 3
    L: int = 2
    lam: float = 10.0
    dropout: float = 0.1
    use_factor_similarity: bool = True
    use_residual_attention: bool = True
    share_ggnn_across_factors: bool = True
    share_attention_across_factors: bool = True

    @property
    def dk(self) -> int:
        return self.d // self.K

    def validate(self) -> "ModelConfig":
        if self.K < 1 or self.d % self.K:
            raise ValueError(f"embedding size d={self.d} is not divisible by K={self.K}")
        if self.T < 1 or self.L < 1:
            raise ValueError("T and L must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


GGNN_WEIGHTS = ("H_in", "H_out", "W_z", "U_z", "W_r", "U_r", "W_o", "U_o")
GGNN_BIASES = ("b_in", "b_out")
ATTENTION_NAMES = ("W_1", "W_2", "b_att", "q")
NO_DECAY = frozenset({"chunk_b", "b_in", "b_out", "b_att", "w_f", "q"})


def param_shapes(config: ModelConfig, n_items: int) -> "OrderedDict[str, tuple[int, ...]]":
    d, K, dk = config.d, config.K, config.dk
    g = () if config.share_ggnn_across_factors else (K,)
    a = () if config.share_attention_across_factors else (K,)
    return OrderedDict([
        ("embedding", (n_items, d)),
        ("chunk_W", (K, d, dk)),
        ("chunk_b", (K, dk)),
        ("H_in", g + (dk, dk)),
        ("H_out", g + (dk, dk)),
        ("b_in", g + (dk,)),
        ("b_out", g + (dk,)),
        ("W_z", g + (dk, 2 * dk)),
        ("U_z", g + (dk, dk)),
        ("W_r", g + (dk, 2 * dk)),
        ("U_r", g + (dk, dk)),
        ("W_o", g + (dk, 2 * dk)),
        ("U_o", g + (dk, dk)),
        ("W_q", (d, d)),
        ("W_p", (d, d)),
        ("w_f", (d,)),
        ("W_1", a + (dk, dk)),
        ("W_2", a + (dk, dk)),
        ("b_att", a + (dk,)),
        ("q", a + (dk,)),
        ("W_3", (dk, 2 * dk)),
    ])


class ModelParams:
    """Ordered name -> Tensor mapping of every learnable weight."""

    def __init__(self, tensors: "OrderedDict[str, Tensor]"):
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def decay_flags(self) -> dict[str, bool]:
        return {name: name not in NO_DECAY for name in self.tensors}

    def zero_grad(self) -> None:
        for p in self.tensors.values():
            p.zero_grad()

    def grads(self) -> dict[str, np.ndarray]:
        return {name: p.grad for name, p in self.tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(OrderedDict(
            (n, Tensor(p.data.copy(), requires_grad=True, dtype=p.dtype)) for n, p in self.tensors.items()
        ))

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(OrderedDict(
            (n, Tensor(p.data.astype(dtype), requires_grad=True, dtype=dtype)) for n, p in self.tensors.items()
        ))


def init_params(config: ModelConfig, n_items: int, rng: np.random.Generator, dtype=None) -> ModelParams:
    config.validate()
    return ModelParams(OrderedDict(
        (name, gaussian_init(shape, rng, dtype=dtype)) for name, shape in param_shapes(config, n_items).items()
    ))


# -- helpers ------------------------------------------------------------

def _linear(x: Tensor, W: Tensor) -> Tensor:
    """``x @ W.T``; a per-factor ``W`` of shape (K, out, in) lines up with x's factor axis."""
    return T.matmul(x, T.swapaxes(W, -1, -2))


def _bias(b: Tensor) -> Tensor:
    # per-factor biases (K, dk) broadcast against (..., K, M, dk)
    return T.reshape(b, (b.shape[0], 1, b.shape[1])) if b.ndim == 2 else b


def _to_flat(c: Tensor) -> Tensor:
    B, K, M, dk = c.shape
    return T.reshape(T.transpose(c, (0, 2, 1, 3)), (B, M, K * dk))


def _to_factors(e: Tensor, K: int) -> Tensor:
    B, M, d = e.shape
    return T.transpose(T.reshape(e, (B, M, K, d // K)), (0, 2, 1, 3))


# -- equations ----------------------------------------------------------

def chunk_embeddings(params: ModelParams, e) -> Tensor:
    """Factor chunks ``normalize(sigmoid(W_k^T e) + b_k)`` of embeddings ``e`` (n, d) -> (K, n, dk)."""
    e = T.as_tensor(e)
    W, b = params["chunk_W"], params["chunk_b"]
    if e.shape[-1] != W.shape[1]:
        raise ShapeError(f"embedding width {e.shape[-1]} != chunk weight input {W.shape[1]}")
    pre = T.add(T.sigmoid(T.matmul(e, W)), T.reshape(b, (b.shape[0], 1, b.shape[1])))
    return T.l2_normalize(pre, axis=-1)


def flatten_chunks(chunks: Tensor) -> Tensor:
    """(K, n, dk) -> (n, K*dk) concatenation of an item's chunks."""
    K, n, dk = chunks.shape
    return T.reshape(T.transpose(chunks, (1, 0, 2)), (n, K * dk))


def ggnn_step(params: ModelParams, c_prev: Tensor, a_in: Tensor, a_out: Tensor) -> Tensor:
    """One gated propagation step for all factors; ``c_prev`` is (B, K, M, dk)."""
    msg_in = T.add(_linear(T.matmul(a_in, c_prev), params["H_in"]), _bias(params["b_in"]))
    msg_out = T.add(_linear(T.matmul(a_out, c_prev), params["H_out"]), _bias(params["b_out"]))
    a = T.concat([msg_in, msg_out], axis=-1)
    z = T.sigmoid(T.add(_linear(a, params["W_z"]), _linear(c_prev, params["U_z"])))
    r = T.sigmoid(T.add(_linear(a, params["W_r"]), _linear(c_prev, params["U_r"])))
    cand = T.tanh(T.add(_linear(a, params["W_o"]), _linear(T.mul(r, c_prev), params["U_o"])))
    out = T.add(T.mul(T.sub(1.0, z), c_prev), T.mul(z, cand))
    if not np.all(np.isfinite(out.data)):
        b, k, i, _ = np.argwhere(~np.isfinite(out.data))[0]
        raise NonFiniteError(f"non-finite GGNN state at session {b}, factor {k}, node {i}")
    return out


def residual_gate(params: ModelParams, e_prev: Tensor, e_ggnn: Tensor) -> Tensor:
    inner = T.sigmoid(T.add(_linear(e_prev, params["W_q"]), _linear(e_ggnn, params["W_p"])))
    w_f = params["w_f"]
    return T.sigmoid(T.matmul(inner, T.reshape(w_f, (w_f.shape[0], 1))))


def residual_fuse(params: ModelParams, e_prev, e_ggnn) -> Tensor:
    """alpha * e_prev + (1 - alpha) * e_ggnn with alpha = sigmoid(w_f . sigmoid(W_q e_prev + W_p e_ggnn))."""
    e_prev, e_ggnn = T.as_tensor(e_prev), T.as_tensor(e_ggnn)
    if e_prev.shape != e_ggnn.shape:
        raise ShapeError(f"residual inputs differ: {e_prev.shape} vs {e_ggnn.shape}")
    squeeze = e_prev.ndim == 1
    if squeeze:
        e_prev, e_ggnn = T.reshape(e_prev, (1, -1)), T.reshape(e_ggnn, (1, -1))
    alpha = residual_gate(params, e_prev, e_ggnn)
    out = T.add(T.mul(alpha, e_prev), T.mul(T.sub(1.0, alpha), e_ggnn))
    return T.reshape(out, (-1,)) if squeeze else out


# -- distance correlation -----------------------------------------------

def _double_centered(dist: Tensor, pair_mask: np.ndarray, n: np.ndarray) -> Tensor:
    """Masked double centring of distance matrices ``(..., M, M)``; ``n`` broadcasts as (..., 1, 1)."""
    pm = pair_mask.astype(dist.dtype)
    inv_n = (1.0 / np.maximum(n, 1)).astype(dist.dtype)
    dm = T.mul(dist, pm)
    row = T.mul(T.tsum(dm, axis=-1, keepdims=True), inv_n)
    col = T.mul(T.tsum(dm, axis=-2, keepdims=True), inv_n)
    grand = T.mul(T.tsum(row, axis=-2, keepdims=True), inv_n)
    centred = T.add(T.sub(T.sub(dm, row), col), grand)
    return T.mul(centred, pm)


def _dcor_from_gram(gram: Tensor, n: np.ndarray) -> Tensor:
    """Pairwise dCor from the (..., K, K) Gram of double-centred matrices, scaled by 1/n^2."""
    g = T.clamp_min(gram, 0.0)
    dcov = T.sqrt(T.add(g, EPS))
    K = gram.shape[-1]
    idx = np.arange(K)
    dvar = dcov[(Ellipsis, idx, idx)]  # (..., K)
    denom = T.sqrt(T.mul(T.reshape(dvar, dvar.shape + (1,)), T.reshape(dvar, dvar.shape[:-1] + (1, K))))
    dcor = T.div(dcov, denom)
    var_ok = np.diagonal(g.data, axis1=-2, axis2=-1) > EPS
    valid = var_ok[..., :, None] & var_ok[..., None, :] & (n >= 2)
    return T.mul(dcor, valid.astype(gram.dtype))


def distance_correlation(X, Y) -> Tensor:
    """Sample distance correlation of the rows of ``X`` (n, p) and ``Y`` (n, q)."""
    X, Y = T.as_tensor(X), T.as_tensor(Y)
    if X.shape[0] != Y.shape[0]:
        raise ShapeError(f"dCor needs equal row counts, got {X.shape} and {Y.shape}")
    n = X.shape[0]
    if n < 2:
        raise ValueError("dCor needs at least two rows")
    pm = np.ones((n, n), dtype=bool)
    nn = np.array(n)
    a = _double_centered(T.pairwise_distance(X), pm, nn)
    b = _double_centered(T.pairwise_distance(Y), pm, nn)
    flat = T.reshape(T.concat([T.reshape(a, (1, n * n)), T.reshape(b, (1, n * n))], axis=0), (2, n * n))
    gram = T.mul(T.matmul(flat, T.transpose(flat)), 1.0 / (n * n))
    return _dcor_from_gram(gram, nn)[0, 1]


def pairwise_dcor(chunks: Tensor, node_mask: np.ndarray) -> Tensor:
    """dCor between every pair of factors of each session: (B, K, M, dk) -> (B, K, K)."""
    B, K, M, _ = chunks.shape
    n = node_mask.sum(axis=1)
    pm = (node_mask[:, :, None] & node_mask[:, None, :])[:, None]  # (B, 1, M, M)
    centred = _double_centered(T.pairwise_distance(chunks), pm, n[:, None, None, None])
    flat = T.reshape(centred, (B, K, M * M))
    scale = (1.0 / np.maximum(n, 1) ** 2).astype(chunks.dtype)[:, None, None]
    gram = T.mul(T.matmul(flat, T.swapaxes(flat, -1, -2)), scale)
    return _dcor_from_gram(gram, n[:, None, None])


def disentanglement_loss(chunks, node_mask: np.ndarray | None = None) -> Tensor:
    """Sum of dCor over unordered factor pairs, averaged over sessions.

    ``chunks`` is (K, n, dk) for one session or (B, K, M, dk) with a node mask.
    """
    chunks = T.as_tensor(chunks)
    if chunks.ndim == 3:
        chunks = T.reshape(chunks, (1,) + chunks.shape)
        node_mask = np.ones((1, chunks.shape[2]), dtype=bool)
    B, K = chunks.shape[:2]
    if K == 1:
        return Tensor(np.zeros((), dtype=chunks.dtype))
    upper = np.triu(np.ones((K, K), dtype=chunks.dtype), k=1)
    per_session = T.tsum(T.mul(pairwise_dcor(chunks, node_mask), upper), axis=(1, 2))
    return T.mean(per_session)


# -- session embedding, scoring, losses ---------------------------------

@dataclass
class SessionEmbedding:
    s_l: Tensor  # (B, d)
    s_g: Tensor  # (B, d)
    s_h: Tensor  # (B, d)
    alpha: Tensor  # (B, P, K)


def session_embed(params: ModelParams, positions: Tensor, mask: np.ndarray, last: Tensor | None = None
                  ) -> SessionEmbedding:
    """Factor-level attention pooling.

    ``positions`` is (B, K, P, dk): the chunks of each clicked position.  ``last``
    (B, K, dk) defaults to the chunks at each session's final unmasked position.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=1).all():
        raise ValueError("session_embed needs at least one unmasked position per session")
    B, K, P, dk = positions.shape
    if last is None:
        last_pos = mask.shape[1] - 1 - np.argmax(mask[:, ::-1], axis=1)
        last = positions[(np.arange(B), slice(None), last_pos)]
    q = params["q"]
    q_col = T.reshape(q, q.shape + (1,))  # (dk, 1) or (K, dk, 1)
    hidden = T.sigmoid(T.add(T.add(_linear(T.reshape(last, (B, K, 1, dk)), params["W_1"]),
                                   _linear(positions, params["W_2"])), _bias(params["b_att"])))
    alpha = T.mul(T.matmul(hidden, q_col), mask[:, None, :, None].astype(positions.dtype))  # (B, K, P, 1)
    s_g = T.tsum(T.mul(alpha, positions), axis=2)  # (B, K, dk)
    s_h = _linear(T.concat([last, s_g], axis=-1), params["W_3"])  # (B, K, dk)
    d = K * dk
    return SessionEmbedding(
        s_l=T.reshape(last, (B, d)),
        s_g=T.reshape(s_g, (B, d)),
        s_h=T.reshape(s_h, (B, d)),
        alpha=T.transpose(T.reshape(alpha, (B, K, P)), (0, 2, 1)),
    )


def item_logits(s_h, candidates) -> Tensor:
    """Dot products of session embeddings (B, d) with candidate embeddings (N, d)."""
    s_h, candidates = T.as_tensor(s_h), T.as_tensor(candidates)
    if s_h.shape[-1] != candidates.shape[-1]:
        raise ShapeError(f"session dim {s_h.shape[-1]} != candidate dim {candidates.shape[-1]}")
    return T.matmul(s_h, T.transpose(candidates))


def score_items(s_h, candidates) -> Tensor:
    return T.softmax(item_logits(s_h, candidates), axis=-1)


def prediction_loss(yhat, target) -> Tensor:
    """Two-term cross entropy against one-hot targets, averaged over rows."""
    yhat = T.as_tensor(yhat)
    squeeze = yhat.ndim == 1
    if squeeze:
        yhat = T.reshape(yhat, (1, -1))
    target = np.atleast_1d(np.asarray(target))
    onehot = np.zeros(yhat.shape, dtype=yhat.dtype)
    onehot[np.arange(len(target)), target] = 1.0
    pos = T.mul(T.log(T.clamp_min(yhat, LOG_FLOOR)), onehot)
    neg = T.mul(T.log(T.clamp_min(T.sub(1.0, yhat), LOG_FLOOR)), 1.0 - onehot)
    per_row = T.neg(T.tsum(T.add(pos, neg), axis=-1))
    return T.mean(per_row)


def total_loss(loss_c, loss_dec, lam: float):
    if isinstance(loss_c, Tensor) or isinstance(loss_dec, Tensor):
        return T.add(loss_c, T.mul(loss_dec, lam))
    return loss_c + lam * loss_dec


# -- full forward pass --------------------------------------------------

@dataclass
class ForwardOutput:
    logits: Tensor
    yhat: Tensor
    loss_c: Tensor | None
    loss_dec: Tensor
    loss: Tensor | None
    embedding: SessionEmbedding


def forward(
    config: ModelConfig,
    params: ModelParams,
    sequences: Sequence[Sequence[int]],
    labels: Sequence[int] | None = None,
    training: bool = False,
    rng: np.random.Generator | None = None,
    pad_fill: float = 0.0,
) -> ForwardOutput:
    """Score every item for each session prefix in ``sequences``.

    ``pad_fill`` is the value written into padded node slots; it never reaches
    any output and exists so tests can perturb padding.
    """
    if training and config.dropout > 0 and rng is None:
        raise ValueError("training-mode forward with dropout needs an rng")
    n_items = params["embedding"].shape[0]
    graph: BatchGraph = batch_graphs(sequences, pad_index=n_items)
    K, dk = config.K, config.dk
    B, M = graph.node_items.shape

    cand_chunks = chunk_embeddings(params, params["embedding"])  # (K, N, dk)
    candidates = flatten_chunks(cand_chunks)

    items = np.where(graph.node_mask, graph.node_items, 0)
    c0 = T.transpose(cand_chunks[(slice(None), items)], (1, 0, 2, 3))  # (B, K, M, dk)
    node_mask = graph.node_mask[:, None, :, None].astype(c0.dtype)
    c0 = T.add(T.mul(c0, node_mask), (1.0 - node_mask) * pad_fill)

    a_in, a_out = similarity_matrices(c0, graph.adj, config.use_factor_similarity)
    loss_dec = disentanglement_loss(c0, graph.node_mask)

    h = c0
    for layer in range(config.L):
        c = h
        for _ in range(config.T):
            c = ggnn_step(params, c, a_in, a_out)
        if config.use_residual_attention:
            h = _to_factors(residual_fuse(params, _to_flat(h), _to_flat(c)), K)
        else:
            h = c
        if layer < config.L - 1:
            h = T.dropout(h, config.dropout, rng, training)

    bidx = np.arange(B)
    positions = T.transpose(h[(bidx[:, None], slice(None), graph.alias)], (0, 2, 1, 3))  # (B, K, P, dk)
    last = h[(bidx, slice(None), graph.last_slot)]  # (B, K, dk)
    emb = session_embed(params, positions, graph.position_mask, last=last)

    logits = item_logits(emb.s_h, candidates)
    yhat = T.softmax(logits, axis=-1)
    loss_c = loss = None
    if labels is not None:
        loss_c = prediction_loss(yhat, np.asarray(labels))
        loss = total_loss(loss_c, loss_dec, config.lam)
    return ForwardOutput(logits, yhat, loss_c, loss_dec, loss, emb)


def score_sequences(config: ModelConfig, params: ModelParams, sequences: Sequence[Sequence[int]],
                    batch_size: int = 100) -> np.ndarray:
    """Eval-mode logits (n, N) for many sessions."""
    out = []
    with T.no_grad():
        for start in range(0, len(sequences), batch_size):
            out.append(forward(config, params, sequences[start:start + batch_size]).logits.data)
    return np.concatenate(out, axis=0)
