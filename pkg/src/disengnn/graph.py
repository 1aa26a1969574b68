"""Session graphs and factor-wise normalised in/out similarity matrices."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

SIM_FLOOR = 1e-8


@dataclass
class SessionGraph:
    nodes: list[int]
    alias: list[int]
    out_edges: list[tuple[int, int]]
    in_edges: list[tuple[int, int]]

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def adjacency(self) -> np.ndarray:
        """Boolean ``adj[u, v]`` = edge u -> v."""
        adj = np.zeros((self.n_nodes, self.n_nodes), dtype=bool)
        for u, v in self.out_edges:
            adj[u, v] = True
        return adj

    def out_neighbors(self, slot: int) -> list[int]:
        return sorted(v for u, v in self.out_edges if u == slot)

    def in_neighbors(self, slot: int) -> list[int]:
        return sorted(u for u, v in self.out_edges if v == slot)


def build_graph(sequence: Sequence[int]) -> SessionGraph:
    if len(sequence) == 0:
        raise ValueError("session graph needs at least one click")
    slots: dict[int, int] = {}
    nodes: list[int] = []
    alias = []
    for item in sequence:
        if item not in slots:
            slots[item] = len(nodes)
            nodes.append(int(item))
        alias.append(slots[item])
    edges: list[tuple[int, int]] = []
    seen = set()
    for u, v in zip(alias, alias[1:]):
        if (u, v) not in seen:
            seen.add((u, v))
            edges.append((u, v))
    return SessionGraph(nodes, alias, edges, [(v, u) for u, v in edges])


@dataclass
class BatchGraph:
    """Session graphs of a batch padded to a common node count ``M``."""

    node_items: np.ndarray  # (B, M) item index, pad slots hold pad_index
    node_mask: np.ndarray  # (B, M) bool
    alias: np.ndarray  # (B, P) node slot per sequence position (0 at padding)
    position_mask: np.ndarray  # (B, P) bool
    adj: np.ndarray  # (B, M, M) bool, adj[b, u, v] = edge u -> v
    n_nodes: np.ndarray  # (B,)
    last_slot: np.ndarray  # (B,) node slot of the final click


def batch_graphs(sequences: Sequence[Sequence[int]], pad_index: int) -> BatchGraph:
    graphs = [build_graph(seq) for seq in sequences]
    B = len(graphs)
    M = max(g.n_nodes for g in graphs)
    P = max(len(g.alias) for g in graphs)
    node_items = np.full((B, M), pad_index, dtype=np.int64)
    node_mask = np.zeros((B, M), dtype=bool)
    alias = np.zeros((B, P), dtype=np.int64)
    position_mask = np.zeros((B, P), dtype=bool)
    adj = np.zeros((B, M, M), dtype=bool)
    for b, g in enumerate(graphs):
        node_items[b, :g.n_nodes] = g.nodes
        node_mask[b, :g.n_nodes] = True
        alias[b, :len(g.alias)] = g.alias
        position_mask[b, :len(g.alias)] = True
        for u, v in g.out_edges:
            adj[b, u, v] = True
    n_nodes = node_mask.sum(axis=1)
    last_slot = np.array([g.alias[-1] for g in graphs], dtype=np.int64)
    return BatchGraph(node_items, node_mask, alias, position_mask, adj, n_nodes, last_slot)


def raw_similarity(c_i, c_j) -> Tensor:
    """Dot product of two factor chunks, floored at ``SIM_FLOOR``."""
    c_i, c_j = T.as_tensor(c_i), T.as_tensor(c_j)
    if c_i.shape[-1] != c_j.shape[-1]:
        raise ShapeError(f"chunk dimensions differ: {c_i.shape} vs {c_j.shape}")
    return T.clamp_min(T.dot(c_i, c_j), SIM_FLOOR)


def _row_normalize(weights: Tensor, mask: np.ndarray) -> Tensor:
    masked = T.mul(weights, mask.astype(weights.dtype))
    rowsum = T.tsum(masked, axis=-1, keepdims=True)
    # rows without neighbours: divide 0 by 1 so they stay exactly zero
    empty = (rowsum.data == 0).astype(weights.dtype)
    return T.div(masked, T.add(rowsum, empty))


def similarity_matrices(chunks: Tensor, adj: np.ndarray, use_factor_similarity: bool = True
                        ) -> tuple[Tensor, Tensor]:
    """Normalised (A_in, A_out) for node chunks ``(B, K, M, dk)`` and adjacency ``(B, M, M)``.

    Returns tensors of shape ``(B, K, M, M)``.  ``A_out[b, k, i, j]`` is the
    weight of the edge i -> j among i's outgoing edges; ``A_in[b, k, i, j]`` the
    weight of j -> i among i's incoming edges.
    """
    adj_out = adj[:, None, :, :]
    adj_in = np.swapaxes(adj, -1, -2)[:, None, :, :]
    if use_factor_similarity:
        raw = T.clamp_min(T.matmul(chunks, T.swapaxes(chunks, -1, -2)), SIM_FLOOR)
    else:
        B, K, M, _ = chunks.shape
        raw = Tensor(np.ones((B, K, M, M), dtype=chunks.dtype))
    return _row_normalize(raw, adj_in), _row_normalize(raw, adj_out)


def build_similarity_matrices(graph: SessionGraph, chunks, use_factor_similarity: bool = True
                              ) -> tuple[list[Tensor], list[Tensor]]:
    """Per-factor (A_in[k], A_out[k]) for one session.

    ``chunks`` is ``(m, K, dk)``: one chunk per node and factor.
    """
    chunks = T.as_tensor(chunks)
    if chunks.shape[0] != graph.n_nodes:
        raise ShapeError(f"chunks cover {chunks.shape[0]} nodes, graph has {graph.n_nodes}")
    per_factor = T.transpose(chunks, (1, 0, 2))[None]  # (1, K, m, dk)
    a_in, a_out = similarity_matrices(per_factor, graph.adjacency()[None], use_factor_similarity)
    K = chunks.shape[1]
    return [a_in[0, k] for k in range(K)], [a_out[0, k] for k in range(K)]
